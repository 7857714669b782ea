use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use rtsla::decoding::{decode, Algorithm, DecodeParams, DecodeRecord};
use rtsla::evaluation::{autrc, benchmark_latency, run_tournament_between, AdapterScorer, TrCurve};
use rtsla::model::checkpoint::{load_adapter, load_model, save_adapter, save_model};
use rtsla::model::RewardTransformer;
use rtsla::pipeline::RunConfig;
use rtsla::trajectory::{read_jsonl, write_jsonl, PreferencePair};
use rtsla::training::LossRecord;

use crate::artifacts::{tokens, write_csv, Manifest};
use crate::config::{self, usage, Override};
use crate::{Command, Common, DecodeFlags};

const POLICY: &str = "policy.ckpt";
const MODEL: &str = "model.ckpt";
const ADAPTER: &str = "adapter.ckpt";
const PAIRS: &str = "pairs.jsonl";

pub fn run(common: &Common, command: Command) -> Result<()> {
    match command {
        Command::Pretrain { epochs, examples } => {
            let mut o = Vec::new();
            push(&mut o, "pretrain.epochs", epochs);
            push(&mut o, "data.pretrain_examples", examples);
            pretrain(&config::load(common, &o)?)
        }
        Command::Collect { prompts, checkpoint } => {
            let mut o = Vec::new();
            push(&mut o, "data.collect_prompts", prompts);
            collect(&config::load(common, &o)?, checkpoint)
        }
        Command::Train {
            mode,
            epochs,
            lr,
            adapter,
            checkpoint,
            pairs,
        } => {
            let mut o = Vec::new();
            push(&mut o, "train.mode", mode);
            push(&mut o, "train.epochs", epochs);
            push(&mut o, "train.learning_rate", lr);
            train(&config::load(common, &o)?, adapter, checkpoint, pairs)
        }
        Command::Decode { decode } => {
            let cfg = config::load(common, &decode_overrides(&decode))?;
            run_decode(&cfg, &decode)
        }
        Command::Eval {
            decode,
            baseline_algorithm,
            baseline_checkpoint,
            skip_autrc,
        } => {
            let cfg = config::load(common, &decode_overrides(&decode))?;
            let baseline = Algorithm::parse(&baseline_algorithm).map_err(|e| usage(e.to_string()))?;
            eval(&cfg, &decode, baseline, baseline_checkpoint, skip_autrc)
        }
        Command::Bench { decode, warmup } => {
            let mut o = decode_overrides(&decode);
            push(&mut o, "eval.bench_warmup", warmup);
            let cfg = config::load(common, &o)?;
            bench(&cfg, &decode)
        }
    }
}

fn push<T: Into<serde_json::Value>>(o: &mut Vec<Override>, path: &str, v: Option<T>) {
    if let Some(v) = v {
        o.push(Override::new(path, v));
    }
}

fn decode_overrides(f: &DecodeFlags) -> Vec<Override> {
    let mut o = Vec::new();
    push(&mut o, "decode.algorithm", f.algorithm.clone());
    push(&mut o, "decode.sla.depth", f.depth);
    push(&mut o, "decode.sla.width", f.width);
    push(&mut o, "decode.sla.step", f.step);
    push(&mut o, "decode.max_new_tokens", f.max_new_tokens);
    push(&mut o, "data.eval_prompts", f.prompts);
    if f.sampled_children {
        o.push(Override::new("decode.sla.sampled_children", true));
    }
    o
}

fn load(path: &Path, manifest: &mut Manifest) -> Result<RewardTransformer> {
    let m = load_model(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    manifest.input(path);
    Ok(m)
}

/// The explicit checkpoint, else the trained model, else the policy.
fn model_path(dir: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    match explicit {
        Some(p) => p.clone(),
        None if dir.join(MODEL).exists() => dir.join(MODEL),
        None => dir.join(POLICY),
    }
}

#[derive(Serialize)]
struct LossRow<'a> {
    phase: &'a str,
    step: usize,
    epoch: usize,
    loss: f64,
    learning_rate: f64,
}

fn loss_rows<'a>(phase: &'a str, records: &[LossRecord]) -> Vec<LossRow<'a>> {
    records
        .iter()
        .map(|r| LossRow {
            phase,
            step: r.step,
            epoch: r.epoch,
            loss: r.loss,
            learning_rate: r.learning_rate,
        })
        .collect()
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let dir = config::output_dir(cfg)?;
    let mut manifest = Manifest::new("pretrain");
    let (model, report) = cfg.pretrained_policy()?;
    let ckpt = dir.join(POLICY);
    save_model(&model, &ckpt)?;
    manifest.output(&ckpt);

    let losses = dir.join("pretrain_loss.csv");
    write_csv(&losses, &loss_rows("pretrain", &report.history))?;
    manifest.output(&losses);
    #[derive(Serialize)]
    struct Ppl {
        epoch: usize,
        perplexity: f64,
    }
    let rows: Vec<Ppl> = report
        .held_out_perplexity
        .iter()
        .enumerate()
        .map(|(epoch, &perplexity)| Ppl { epoch, perplexity })
        .collect();
    let ppl = dir.join("pretrain_perplexity.csv");
    write_csv(&ppl, &rows)?;
    manifest.output(&ppl);
    manifest.write(&dir, cfg)?;
    println!(
        "pretrained {} policy parameters, held-out perplexity {:.4}",
        model.parameter_count(rtsla::model::Channel::Policy),
        report.held_out_perplexity.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn collect(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let dir = config::output_dir(cfg)?;
    let mut manifest = Manifest::new("collect");
    let policy = load(&checkpoint.unwrap_or_else(|| dir.join(POLICY)), &mut manifest)?;
    let pairs = cfg.collect_pairs(&policy, "collect", cfg.data.collect_prompts)?;
    let path = dir.join(PAIRS);
    let mut w = BufWriter::new(File::create(&path)?);
    write_jsonl(&mut w, &pairs)?;
    drop(w);
    manifest.output(&path);
    manifest.write(&dir, cfg)?;
    println!("collected {} pairs from {} prompts", pairs.len(), cfg.data.collect_prompts);
    Ok(())
}

fn train(cfg: &RunConfig, with_adapter: bool, checkpoint: Option<PathBuf>, pairs: Option<PathBuf>) -> Result<()> {
    let dir = config::output_dir(cfg)?;
    let mut manifest = Manifest::new("train");
    let policy = load(&checkpoint.unwrap_or_else(|| dir.join(POLICY)), &mut manifest)?;
    let pairs_path = pairs.unwrap_or_else(|| dir.join(PAIRS));
    let file = File::open(&pairs_path).with_context(|| format!("opening pairs {}", pairs_path.display()))?;
    let pairs: Vec<PreferencePair> = read_jsonl(BufReader::new(file))?;
    manifest.input(&pairs_path);

    let (model, report) = cfg.train_model(&policy, &pairs)?;
    let ckpt = dir.join(MODEL);
    save_model(&model, &ckpt)?;
    manifest.output(&ckpt);
    let mut rows = loss_rows("dpo", &report.dpo);
    rows.extend(loss_rows("reward", &report.reward));
    if with_adapter {
        let (adapter, losses) = cfg.train_adapter(&policy, &pairs)?;
        let a = dir.join(ADAPTER);
        save_adapter(&adapter, &a)?;
        manifest.output(&a);
        rows.extend(loss_rows("adapter", &losses));
    }
    let losses = dir.join("train_loss.csv");
    write_csv(&losses, &rows)?;
    manifest.output(&losses);
    manifest.write(&dir, cfg)?;
    let last = |r: &[LossRecord]| r.last().map_or(f64::NAN, |x| x.loss);
    println!("trained on {} pairs, final reward loss {:.4}", pairs.len(), last(&report.reward));
    Ok(())
}

fn label(cfg: &RunConfig, flags: &DecodeFlags) -> String {
    flags.label.clone().unwrap_or_else(|| cfg.decode.algorithm.name().to_string())
}

fn run_decode(cfg: &RunConfig, flags: &DecodeFlags) -> Result<()> {
    let dir = config::output_dir(cfg)?;
    let label = label(cfg, flags);
    let mut manifest = Manifest::new(format!("decode_{label}"));
    let model = load(&model_path(&dir, &flags.checkpoint), &mut manifest)?;
    let params = cfg.resolved().decode;
    let prompts = cfg.prompts("eval", cfg.data.eval_prompts);
    let mut records = Vec::with_capacity(prompts.len());
    #[derive(Serialize)]
    struct Row {
        prompt_id: usize,
        response: String,
    }
    let mut rows = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let d = decode(&model, prompt, &params, &mut |_| {}).with_context(|| format!("prompt {i}"))?;
        rows.push(Row {
            prompt_id: i,
            response: tokens(&d.response),
        });
        records.push(DecodeRecord {
            prompt_id: i,
            prompt: prompt.clone(),
            response: d.response,
            algorithm: params.algorithm,
            params: params.clone(),
            chosen_q: d.chosen_q,
        });
    }
    let jsonl = dir.join(format!("decode_{label}.jsonl"));
    let mut w = BufWriter::new(File::create(&jsonl)?);
    write_jsonl(&mut w, &records)?;
    drop(w);
    manifest.output(&jsonl);
    let csv = dir.join(format!("responses_{label}.csv"));
    write_csv(&csv, &rows)?;
    manifest.output(&csv);
    manifest.write(&dir, cfg)?;
    println!("decoded {} prompts with {}", prompts.len(), params.algorithm.name());
    Ok(())
}

fn eval(cfg: &RunConfig, flags: &DecodeFlags, baseline: Algorithm, baseline_ckpt: Option<PathBuf>, skip_autrc: bool) -> Result<()> {
    let dir = config::output_dir(cfg)?;
    let label = label(cfg, flags);
    let mut manifest = Manifest::new(format!("eval_{label}"));
    let model = load(&model_path(&dir, &flags.checkpoint), &mut manifest)?;
    let base_model = match &baseline_ckpt {
        Some(p) => load(p, &mut manifest)?,
        None => model.clone(),
    };
    let candidate = cfg.resolved().decode;
    let base = DecodeParams {
        algorithm: baseline,
        ..candidate.clone()
    };
    let prompts = cfg.prompts("eval", cfg.data.eval_prompts);
    let oracle = cfg.oracle();
    let t = run_tournament_between((&model, &candidate), (&base_model, &base), &prompts, &oracle)?;
    #[derive(Serialize)]
    struct Row {
        prompt_id: usize,
        candidate_score: Option<f64>,
        baseline_score: Option<f64>,
        verdict: String,
        candidate_response: String,
        baseline_response: String,
        diagnostic: String,
    }
    let rows: Vec<Row> = t
        .outcomes
        .iter()
        .map(|o| Row {
            prompt_id: o.prompt_id,
            candidate_score: o.candidate_score,
            baseline_score: o.baseline_score,
            verdict: serde_json::to_value(o.verdict).unwrap().as_str().unwrap().to_string(),
            candidate_response: tokens(&o.candidate_response),
            baseline_response: tokens(&o.baseline_response),
            diagnostic: o.diagnostic.clone().unwrap_or_default(),
        })
        .collect();
    let csv = dir.join(format!("tournament_{label}.csv"));
    write_csv(&csv, &rows)?;
    manifest.output(&csv);
    let (w, ti, l) = t.counts();
    let mut summary = json!({
        "candidate": candidate.algorithm.name(),
        "baseline": baseline.name(),
        "prompts": prompts.len(),
        "win_rate": t.win_rate,
        "wins": w,
        "ties": ti,
        "losses": l,
    });
    println!("win_rate {:.2} wins {w} ties {ti} losses {l}", t.win_rate);

    let held = if skip_autrc {
        Vec::new()
    } else {
        cfg.collect_pairs(&model, "autrc", cfg.data.autrc_prompts)?
    };
    if !skip_autrc && held.is_empty() {
        println!("autrc skipped: no held-out prompt produced a preference pair");
    }
    if !held.is_empty() {
        let rt = autrc(&model, &held)?;
        let adapter_path = dir.join(ADAPTER);
        let adapter = if adapter_path.exists() {
            let a = load_adapter(&adapter_path)?;
            manifest.input(&adapter_path);
            Some(autrc(&AdapterScorer { model: &model, adapter: &a }, &held)?)
        } else {
            None
        };
        let csv = dir.join("autrc.csv");
        write_curves(&csv, &rt, adapter.as_ref())?;
        manifest.output(&csv);
        summary["autrc_pairs"] = json!(held.len());
        summary["autrc"] = json!(rt.area);
        println!("autrc {:.4} over {} pairs", rt.area, held.len());
        if let Some(a) = adapter {
            summary["adapter_autrc"] = json!(a.area);
            println!("adapter_autrc {:.4}", a.area);
        }
    }
    let path = dir.join(format!("eval_{label}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
    manifest.output(&path);
    manifest.write(&dir, cfg)?;
    Ok(())
}

fn write_curves(path: &Path, rt: &TrCurve, adapter: Option<&TrCurve>) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        x: f64,
        reward_transformer: f64,
        adapter: Option<f64>,
    }
    let rows: Vec<Row> = (0..rt.x.len())
        .map(|i| Row {
            x: rt.x[i],
            reward_transformer: rt.agreement[i],
            adapter: adapter.map(|a| a.agreement[i]),
        })
        .collect();
    write_csv(path, &rows)
}

fn bench(cfg: &RunConfig, flags: &DecodeFlags) -> Result<()> {
    let dir = config::output_dir(cfg)?;
    let label = label(cfg, flags);
    let mut manifest = Manifest::new(format!("bench_{label}"));
    let model = load(&model_path(&dir, &flags.checkpoint), &mut manifest)?;
    let params = cfg.resolved().decode;
    let n = flags.prompts.unwrap_or(cfg.eval.bench_prompts);
    let prompts = cfg.prompts("bench", n);
    let rows = benchmark_latency(&model, &prompts, &[(label.clone(), params)], cfg.eval.bench_warmup)?;
    let csv = dir.join(format!("latency_{label}.csv"));
    write_csv(&csv, &rows)?;
    manifest.output(&csv);
    manifest.write(&dir, cfg)?;
    for r in &rows {
        println!(
            "{} tokens/s {:.1} ratio {:.3} forwards/token {:.3}",
            r.config, r.tokens_per_sec, r.ratio, r.forwards_per_token
        );
    }
    Ok(())
}
