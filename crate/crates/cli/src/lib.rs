//! Command implementations behind the `sevloss` binary.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use sevloss::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sevloss::dataset::{
    compute_stats, load_records, make_batches, parse_records, save_records, split, synth_corpus,
    BatchPlan, ComplaintRecord, LoadMode, SynthSpec,
};
use sevloss::optim::OptimizerState;
use sevloss::trainer::{evaluate, gradcheck, reference_gradcheck_config, EvalReport, History, Metrics, Trainer};
use sevloss::{generate, ModelConfig, SeverityClass, Tokenizer, TransformerLM, Weighting};

pub use config::{Overrides, Resolved, RunConfig};

/// Records, tokenizer and batches for one run, all derived from the seed.
pub struct Prepared {
    pub train: Vec<ComplaintRecord>,
    pub valid: Vec<ComplaintRecord>,
    pub tokenizer: Tokenizer,
    pub plan: BatchPlan,
    pub model: ModelConfig,
}

fn load_strict(path: &Path) -> Result<Vec<ComplaintRecord>> {
    Ok(load_records(path, LoadMode::Strict)
        .with_context(|| format!("loading {}", path.display()))?
        .records)
}

pub fn prepare(cfg: &RunConfig, resolved: &Resolved) -> Result<Prepared> {
    let seed = cfg.seed;
    let all = match (&cfg.data.train, cfg.data.synth_sizes) {
        (Some(path), _) => load_strict(path)?,
        (None, Some(sizes)) => synth_corpus(&SynthSpec::with_sizes(sizes, seed))?,
        (None, None) => bail!("no training data configured"),
    };
    let (train, valid) = match &cfg.data.valid {
        Some(path) => (all, load_strict(path)?),
        None => {
            let s = split(&all, cfg.data.split, seed)?;
            (s.train, s.valid)
        }
    };
    let text: Vec<&str> = train
        .iter()
        .flat_map(|r| [r.question.as_str(), r.answer.as_str()])
        .collect();
    let tokenizer = Tokenizer::build_vocab(&text)?;
    let model = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        ..resolved.model.clone()
    };
    let plan = make_batches(
        &train,
        &tokenizer,
        resolved.train.batch_size,
        model.max_seq_len,
        seed,
    )?;
    if !plan.skipped.is_empty() {
        eprintln!(
            "skipped {} of {} training records that do not fit max_seq_len {}",
            plan.skipped.len(),
            train.len(),
            model.max_seq_len
        );
    }
    if plan.batches.is_empty() {
        bail!("no training record fits max_seq_len {}", model.max_seq_len);
    }
    Ok(Prepared {
        train,
        valid,
        tokenizer,
        plan,
        model,
    })
}

pub struct RunOutcome {
    pub model: TransformerLM,
    pub optimizer: OptimizerState,
    pub tokenizer: Tokenizer,
    pub history: History,
    pub valid: Vec<ComplaintRecord>,
}

/// Prepares data and trains. Step progress is logged at info level.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutcome> {
    let resolved = cfg.resolve()?;
    let prep = prepare(cfg, &resolved)?;
    let model = TransformerLM::new(prep.model.clone())?;
    let steps = resolved.train.steps;
    let every = (steps / 20).max(1);
    let mut trainer = Trainer::new(model, resolved.train.clone())?;
    let history = trainer.run(&prep.plan.batches, &prep.valid, &prep.tokenizer, |s| {
        if (s.step + 1) % every == 0 || s.step + 1 == steps {
            info!(
                "step {}/{} loss {:.6} mean weight {:.4}",
                s.step + 1,
                steps,
                s.loss,
                s.mean_weight
            );
        }
        if let Some(e) = &s.eval {
            info!("step {} valid nll {:.6}", s.step + 1, e.overall.mean_nll);
        }
    })?;
    let (model, optimizer) = trainer.into_parts();
    Ok(RunOutcome {
        model,
        optimizer,
        tokenizer: prep.tokenizer,
        history,
        valid: prep.valid,
    })
}

pub fn write_history(path: &Path, history: &History) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    history.write_jsonl(BufWriter::new(file))?;
    Ok(())
}

pub fn cmd_train(config: &Path, overrides: &Overrides) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply(overrides);
    let resolved = cfg.resolve()?;
    println!("{resolved}");
    let out = run_training(&cfg)?;
    write_history(&cfg.output.history, &out.history)?;
    let ckpt = Checkpoint {
        seed: cfg.seed,
        model: out.model,
        tokenizer: out.tokenizer,
        optimizer: out.optimizer,
    };
    save_checkpoint(&cfg.output.checkpoint, &ckpt)
        .with_context(|| format!("writing {}", cfg.output.checkpoint.display()))?;
    println!("history = {:?}", cfg.output.history.display().to_string());
    println!("checkpoint = {:?}", cfg.output.checkpoint.display().to_string());
    if !out.valid.is_empty() {
        let r = evaluate(&ckpt.model, &out.valid, &ckpt.tokenizer)?;
        print!("{}", format_report(&r));
    }
    Ok(())
}

/// Validates every line; prints diagnostics to stderr. Returns whether the
/// file is valid.
pub fn cmd_validate_data(path: &Path, out: &mut impl Write) -> Result<bool> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let parsed = parse_records(std::io::BufReader::new(file))?;
    for issue in &parsed.issues {
        eprintln!("{}:{}: {}", path.display(), issue.line, issue.error);
    }
    if parsed.records.is_empty() && parsed.issues.is_empty() {
        eprintln!("{}: no records", path.display());
        return Ok(false);
    }
    if !parsed.issues.is_empty() {
        eprintln!(
            "{}: {} invalid of {} lines",
            path.display(),
            parsed.issues.len(),
            parsed.issues.len() + parsed.records.len()
        );
        return Ok(false);
    }
    writeln!(out, "ok: {} records", parsed.records.len())?;
    Ok(true)
}

pub fn cmd_stats(path: &Path, weighting: &Weighting, json: bool, out: &mut impl Write) -> Result<()> {
    let records = load_strict(path)?;
    let s = compute_stats(&records, weighting)?;
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&s)?)?;
        return Ok(());
    }
    writeln!(out, "records: {}", s.count)?;
    for c in SeverityClass::ALL {
        let i = c.index();
        writeln!(
            out,
            "{:<13} count {:>6}  fraction {:.4}  mean p {:.4}",
            c.as_str(),
            s.class_counts[i],
            s.class_fractions[i],
            s.mean_distribution[i]
        )?;
    }
    writeln!(
        out,
        "weights under {}: min {:.4}  mean {:.4}  max {:.4}",
        s.weights.weighting, s.weights.min, s.weights.mean, s.weights.max
    )?;
    Ok(())
}

pub fn cmd_synth(sizes: [usize; 3], seed: u64, path: &Path, out: &mut impl Write) -> Result<()> {
    let records = synth_corpus(&SynthSpec::with_sizes(sizes, seed))?;
    save_records(path, &records).with_context(|| format!("writing {}", path.display()))?;
    writeln!(out, "wrote {} records to {}", records.len(), path.display())?;
    Ok(())
}

fn metrics_line(name: &str, m: &Metrics) -> String {
    format!(
        "{name:<13} nll {:.6}  ppl {:.4}  acc {:.4}  tokens {:>7}  records {:>6}\n",
        m.mean_nll, m.perplexity, m.accuracy, m.tokens, m.records
    )
}

pub fn format_report(r: &EvalReport) -> String {
    let mut s = metrics_line("overall", &r.overall);
    for c in SeverityClass::ALL {
        if let Some(m) = r.class(c) {
            s.push_str(&metrics_line(c.as_str(), m));
        }
    }
    if r.skipped > 0 {
        s.push_str(&format!("skipped {} records longer than the context\n", r.skipped));
    }
    s
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, json: bool, out: &mut impl Write) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let records = load_strict(data)?;
    let r = evaluate(&ckpt.model, &records, &ckpt.tokenizer)?;
    if r.skipped > 0 {
        warn!("{} records do not fit the model context and were skipped", r.skipped);
    }
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&r)?)?;
    } else {
        write!(out, "{}", format_report(&r))?;
    }
    Ok(())
}

/// Returns whether every tensor passed.
pub fn cmd_gradcheck(
    trials: usize,
    tolerance: f64,
    seed: u64,
    weighting: &Weighting,
    out: &mut impl Write,
) -> Result<bool> {
    let report = gradcheck(&reference_gradcheck_config(seed), weighting, trials, tolerance)?;
    for t in &report.tensors {
        writeln!(
            out,
            "{:<20} max rel {:.3e}  max abs {:.3e}{}",
            t.name,
            t.max_rel_error,
            t.max_abs_error,
            if t.max_rel_error <= tolerance { "" } else { "  FAIL" }
        )?;
    }
    writeln!(
        out,
        "{} coordinates checked, {} skipped at activation kinks, tolerance {:e}: {}",
        report.checked,
        report.skipped,
        tolerance,
        if report.passed { "pass" } else { "fail" }
    )?;
    Ok(report.passed)
}

pub fn cmd_generate(checkpoint: &Path, prompt: &str, max_new: usize, out: &mut impl Write) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let text = generate(&ckpt.model, &ckpt.tokenizer, prompt, max_new)?;
    writeln!(out, "{text}")?;
    Ok(())
}
