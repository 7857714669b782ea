//! Run configuration and the shared steps of the experiment pipeline.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::decoding::DecodeParams;
use crate::error::{Error, Result};
use crate::model::{AdapterRewardHead, ModelConfig, RewardTransformer};
use crate::rng;
use crate::tasks::TaskSpec;
use crate::training::{
    collect_pairs, pretrain_policy, train, train_adapter, CollectConfig, LossRecord, PretrainConfig, PretrainReport, TrainConfig,
    TrainMode, TrainReport,
};
use crate::trajectory::PreferencePair;

/// Dataset sizes for each pipeline stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub pretrain_examples: usize,
    pub held_out_examples: usize,
    pub collect_prompts: usize,
    pub eval_prompts: usize,
    pub autrc_prompts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain_examples: 3000,
            held_out_examples: 100,
            collect_prompts: 3000,
            eval_prompts: 200,
            autrc_prompts: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Depth of the adapter baseline head.
    pub adapter_depth: usize,
    pub adapter_hidden: usize,
    /// Learning rate for the adapter baseline.
    pub adapter_learning_rate: f64,
    pub bench_prompts: usize,
    pub bench_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            adapter_depth: 1,
            adapter_hidden: 64,
            adapter_learning_rate: 5e-5,
            bench_prompts: 20,
            bench_warmup: 1,
        }
    }
}

/// Everything one pipeline run needs. Component seeds are derived from
/// `seed` by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub collect: CollectConfig,
    pub train: TrainConfig,
    pub decode: DecodeParams,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::sortedness(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            collect: CollectConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeParams::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.collect.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.model.vocab_size != self.task.vocab_size() {
            return Err(Error::parameter(format!(
                "model vocabulary {} differs from task vocabulary {}",
                self.model.vocab_size,
                self.task.vocab_size()
            )));
        }
        if self.task.max_sequence_len() > self.model.max_seq_len {
            return Err(Error::parameter(format!(
                "task sequences need {} positions but max_seq_len is {}",
                self.task.max_sequence_len(),
                self.model.max_seq_len
            )));
        }
        Ok(())
    }

    /// Copy whose component seeds are derived from the run seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = rng::derive_seed(self.seed, "pretrain");
        c.collect.seed = rng::derive_seed(self.seed, "collect");
        c.train.seed = rng::derive_seed(self.seed, "train");
        c.decode.seed = rng::derive_seed(self.seed, "decode");
        c
    }

    /// `count` prompts from the named prompt stream.
    pub fn prompts(&self, key: &str, count: usize) -> Vec<Vec<u32>> {
        let mut g = rng::stream(self.seed, &format!("prompts/{key}"));
        (0..count).map(|_| self.task.sample_prompt(&mut g)).collect()
    }

    pub fn oracle(&self) -> impl Fn(&[u32], &[u32]) -> f64 + '_ {
        move |p, r| self.task.oracle(p, r)
    }

    /// A freshly initialized model, then policy pretraining on the task
    /// corpus.
    pub fn pretrained_policy(&self) -> Result<(RewardTransformer, PretrainReport)> {
        let c = self.resolved();
        let mut model = RewardTransformer::new(self.model.clone(), rng::derive_seed(self.seed, "init"))?;
        let mut g = rng::stream(self.seed, "corpus");
        let corpus = self.task.corpus(self.data.pretrain_examples, &mut g);
        let held_out = self.task.corpus(self.data.held_out_examples, &mut g);
        let report = pretrain_policy(&mut model, &corpus, &held_out, &c.pretrain)?;
        Ok((model, report))
    }

    /// Preference pairs sampled from `policy` on the collection prompts.
    pub fn collect_pairs(&self, policy: &RewardTransformer, key: &str, prompts: usize) -> Result<Vec<PreferencePair>> {
        let c = self.resolved();
        let mut cfg = c.collect.clone();
        cfg.seed = rng::derive_seed(c.collect.seed, key);
        collect_pairs(policy, &self.prompts(key, prompts), &self.oracle(), &cfg)
    }

    /// A copy of `policy` trained in the configured mode.
    pub fn train_model(&self, policy: &RewardTransformer, pairs: &[PreferencePair]) -> Result<(RewardTransformer, TrainReport)> {
        self.train_model_as(policy, pairs, self.train.mode)
    }

    pub fn train_model_as(
        &self,
        policy: &RewardTransformer,
        pairs: &[PreferencePair],
        mode: TrainMode,
    ) -> Result<(RewardTransformer, TrainReport)> {
        let mut cfg = self.resolved().train;
        cfg.mode = mode;
        let mut model = policy.clone();
        let report = train(&mut model, pairs, &cfg)?;
        Ok((model, report))
    }

    /// The adapter baseline trained over the frozen policy of `model`.
    pub fn train_adapter(&self, model: &RewardTransformer, pairs: &[PreferencePair]) -> Result<(AdapterRewardHead, Vec<LossRecord>)> {
        let e = &self.eval;
        let mut adapter = AdapterRewardHead::new(
            model.config().d_model,
            e.adapter_depth,
            e.adapter_hidden,
            rng::derive_seed(self.seed, "adapter"),
        )?;
        let mut cfg = self.resolved().train;
        cfg.learning_rate = e.adapter_learning_rate;
        let losses = train_adapter(model, &mut adapter, pairs, &cfg)?;
        Ok((adapter, losses))
    }
}
