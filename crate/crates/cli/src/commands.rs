use std::env;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pwguess::corpus::{
    js_divergence, load_corpus, sample_corpus, split_corpus, trigram_distribution, Corpus, FilterPolicy,
};
use pwguess::markov::{train_ngram, NgramConfig, NgramModel};
use pwguess::mc_estimator::{
    build_estimator, compare_curves, guess_numbers, guessing_curve, GuessingCurve, MonteCarloEstimator,
    PasswordModel, SampleStatus,
};
use pwguess::model::checkpoint::{self, CHECKPOINT_MAGIC};
use pwguess::model::{DecoderWeights, ModelConfig};
use pwguess::psm::{
    calibrate_scaling, error_matrix, min_guess_table, psm_strength, Precision, PsmBundle, QuantizationMode,
};
use pwguess::training::{finetune_checkpoint, pretrain, LrSchedule, Mode, TrainingConfig};
use pwguess::Error;
use serde_json::{json, Value};

use crate::args::{Command, Oracle, Policy, Quant, Schedule, ScheduleKind};

/// Relative output paths land under this directory; relative inputs missing
/// from the working directory are looked up there too.
pub const OUT_DIR_ENV: &str = "PWGUESS_OUT_DIR";

pub enum CliError {
    Usage(String),
    Domain(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Domain(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn out_dir() -> Option<PathBuf> {
    env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()).map(PathBuf::from)
}

fn input(p: &Path) -> PathBuf {
    if p.is_relative() && !p.exists() {
        if let Some(candidate) = out_dir().map(|d| d.join(p)).filter(|c| c.exists()) {
            return candidate;
        }
    }
    p.to_path_buf()
}

fn output(p: &Path) -> Result<PathBuf> {
    let p = match out_dir() {
        Some(d) if p.is_relative() => d.join(p),
        _ => p.to_path_buf(),
    };
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(p)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn policy(p: &Policy) -> Result<FilterPolicy> {
    Ok(FilterPolicy::new(p.min_len, p.max_len)?)
}

fn corpus(path: &Path, p: &Policy) -> Result<Corpus> {
    Ok(load_corpus(&input(path), policy(p)?)?.0)
}

/// Raw lines, unfiltered, for scoring.
fn lines(path: &Path) -> Result<Vec<Vec<u8>>> {
    let path = input(path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(bytes
        .split(|&b| b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l).to_vec())
        .filter(|l| !l.is_empty())
        .collect())
}

fn text(pw: &[u8]) -> String {
    String::from_utf8_lossy(pw).into_owned()
}

enum Model {
    Decoder(DecoderWeights<f32>),
    Ngram(NgramModel),
}

impl Model {
    /// Dispatches on the file's magic bytes.
    fn load(path: &Path) -> Result<Self> {
        let path = input(path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.starts_with(CHECKPOINT_MAGIC) {
            Ok(Model::Decoder(checkpoint::from_bytes(&bytes)?))
        } else if bytes.starts_with(b"PWNG") {
            Ok(Model::Ngram(NgramModel::from_bytes(&bytes)?))
        } else {
            Err(Error::Format(format!("{} is neither a checkpoint nor an n-gram model", path.display())).into())
        }
    }

    fn scorer(&self) -> &dyn PasswordModel {
        match self {
            Model::Decoder(w) => w,
            Model::Ngram(m) => m,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Model::Decoder(_) => "transformer",
            Model::Ngram(_) => "ngram",
        }
    }
}

fn training_config(s: &Schedule, mode: Mode) -> TrainingConfig {
    let base = match mode {
        Mode::Pretrain => TrainingConfig::pretrain(),
        Mode::Finetune => TrainingConfig::finetune(),
    };
    TrainingConfig {
        epochs: s.epochs,
        batch_size: s.batch,
        learning_rate: s.lr.unwrap_or(base.learning_rate),
        lr_schedule: match s.schedule {
            ScheduleKind::Constant => LrSchedule::Constant,
            ScheduleKind::LinearWarmupDecay => LrSchedule::LinearWarmupDecay,
        },
        warmup_steps: s.warmup,
        weight_decay: s.weight_decay,
        seed: s.seed,
        mode,
    }
}

fn check_pairs(o: &Oracle) -> Result<()> {
    if o.models.len() != o.estimators.len() {
        return Err(CliError::Usage(format!(
            "{} --oracle-model but {} --oracle-est; give them in pairs",
            o.models.len(),
            o.estimators.len()
        )));
    }
    Ok(())
}

fn oracle_table(o: &Oracle, test: &Corpus) -> Result<Option<Vec<Option<f64>>>> {
    check_pairs(o)?;
    if o.models.is_empty() {
        return Ok(None);
    }
    let mut per_model = Vec::new();
    for (m, e) in o.models.iter().zip(&o.estimators) {
        let model = Model::load(m)?;
        let est = MonteCarloEstimator::load(&input(e))?;
        per_model.push(
            guess_numbers(&est, model.scorer(), test.passwords())
                .into_iter()
                .map(|g| g.map(|g| g.guess_number))
                .collect(),
        );
    }
    Ok(Some(min_guess_table(&per_model)?))
}

fn band(g: f64) -> &'static str {
    if g < 1e6 {
        "weak"
    } else if g < 1e12 {
        "medium"
    } else {
        "strong"
    }
}

fn finite(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

pub fn run(cmd: Command) -> Result<Value> {
    match cmd {
        Command::Ingest {
            input: src,
            out,
            dedup,
            policy: p,
        } => {
            let (mut c, report) = load_corpus(&input(&src), policy(&p)?)?;
            if dedup {
                c = c.deduplicated();
            }
            let out = output(&out)?;
            c.write(&out)?;
            Ok(json!({
                "command": "ingest",
                "lines_read": report.lines_read,
                "kept": report.kept,
                "rejected_short": report.rejected_short,
                "rejected_long": report.rejected_long,
                "rejected_charset": report.rejected_charset,
                "written": c.len(),
                "out": out,
            }))
        }
        Command::Sample { data, n, seed, out, policy: p } => {
            let c = sample_corpus(&corpus(&data, &p)?, n, seed)?;
            let out = output(&out)?;
            c.write(&out)?;
            Ok(json!({"command": "sample", "written": c.len(), "seed": seed, "out": out}))
        }
        Command::Split {
            data,
            train_fraction,
            seed,
            out,
            test_out,
            policy: p,
        } => {
            let (train, test) = split_corpus(&corpus(&data, &p)?, train_fraction, seed)?;
            let (out, test_out) = (output(&out)?, output(&test_out)?);
            train.write(&out)?;
            test.write(&test_out)?;
            Ok(json!({
                "command": "split",
                "train": train.len(),
                "test": test.len(),
                "seed": seed,
                "out": out,
                "test_out": test_out,
            }))
        }
        Command::Jsd { a, b, policy: p } => {
            let (ca, cb) = (corpus(&a, &p)?, corpus(&b, &p)?);
            let d = js_divergence(&trigram_distribution(&ca), &trigram_distribution(&cb))?;
            Ok(json!({"command": "jsd", "jsd": d, "a_size": ca.len(), "b_size": cb.len()}))
        }
        Command::Pretrain {
            config,
            data,
            out,
            schedule,
            policy: p,
        } => {
            let cfg = ModelConfig::preset(&config)?;
            let data = corpus(&data, &p)?;
            let tc = training_config(&schedule, Mode::Pretrain);
            let (w, mut report) = pretrain(&cfg, &data, &tc)?;
            let out = output(&out)?;
            checkpoint::save(&w, &out)?;
            report.checkpoint = Some(out.clone());
            if let Some(r) = &schedule.report {
                report.write_jsonl(&output(r)?)?;
            }
            Ok(json!({
                "command": "pretrain",
                "config": config,
                "parameters": w.num_params(),
                "passwords": data.len(),
                "steps": report.steps,
                "epoch_losses": report.epoch_losses,
                "wall_clock_secs": report.wall_clock_secs,
                "out": out,
            }))
        }
        Command::Finetune {
            model,
            config,
            data,
            eval,
            out,
            schedule,
            policy: p,
        } => {
            let expected = config.as_deref().map(ModelConfig::preset).transpose()?;
            let data = corpus(&data, &p)?;
            let eval = eval.map(|e| corpus(&e, &p)).transpose()?;
            let tc = training_config(&schedule, Mode::Finetune);
            let (w, mut report) = finetune_checkpoint(&input(&model), expected.as_ref(), &data, &tc, eval.as_ref())?;
            let out = output(&out)?;
            checkpoint::save(&w, &out)?;
            report.checkpoint = Some(out.clone());
            if let Some(r) = &schedule.report {
                report.write_jsonl(&output(r)?)?;
            }
            Ok(json!({
                "command": "finetune",
                "passwords": data.len(),
                "steps": report.steps,
                "epoch_losses": report.epoch_losses,
                "eval_before": report.eval_before,
                "eval_after": report.eval_after,
                "wall_clock_secs": report.wall_clock_secs,
                "out": out,
            }))
        }
        Command::Gen { model, n, seed, out } => {
            let m = Model::load(&model)?;
            let samples = m.scorer().sample(n, seed)?;
            let count = |s: SampleStatus| samples.iter().filter(|x| x.status == s).count();
            let mut buf = Vec::new();
            for s in samples.iter().filter(|s| s.status == SampleStatus::Complete) {
                buf.extend_from_slice(&s.password);
                buf.push(b'\n');
            }
            let out = output(&out)?;
            write_file(&out, &buf)?;
            Ok(json!({
                "command": "gen",
                "model": m.kind(),
                "n": n,
                "seed": seed,
                "complete": count(SampleStatus::Complete),
                "truncated": count(SampleStatus::Truncated),
                "invalid": count(SampleStatus::Invalid),
                "out": out,
            }))
        }
        Command::Score {
            model,
            est,
            input: src,
            password,
            out,
        } => {
            let m = Model::load(&model)?;
            let est = est.map(|e| MonteCarloEstimator::load(&input(&e))).transpose()?;
            let mut passwords: Vec<Vec<u8>> = src.map(|s| lines(&s)).transpose()?.unwrap_or_default();
            passwords.extend(password.into_iter().map(String::into_bytes));
            if passwords.is_empty() {
                return Err(CliError::Usage("nothing to score: give --input or --password".into()));
            }
            let mut rows = Vec::new();
            let mut tsv = String::from(if est.is_some() {
                "password\tlog_prob\tguess_number\tstandard_error\n"
            } else {
                "password\tlog_prob\n"
            });
            let mut unscorable = 0;
            for pw in &passwords {
                let lp = m.scorer().log_prob(pw).ok().filter(|lp| lp.is_finite());
                unscorable += usize::from(lp.is_none());
                let g = lp.zip(est.as_ref()).map(|(lp, e)| e.estimate(lp));
                let cell = |x: Option<f64>| x.map_or("NA".to_string(), |v| v.to_string());
                tsv.push_str(&text(pw));
                tsv.push('\t');
                tsv.push_str(&cell(lp));
                if est.is_some() {
                    tsv.push_str(&format!(
                        "\t{}\t{}",
                        cell(g.map(|g| g.guess_number)),
                        cell(g.map(|g| g.standard_error))
                    ));
                }
                tsv.push('\n');
                rows.push(json!({
                    "password": text(pw),
                    "log_prob": lp,
                    "guess_number": g.map(|g| finite(g.guess_number)),
                    "standard_error": g.map(|g| finite(g.standard_error)),
                }));
            }
            let mut summary = json!({
                "command": "score",
                "model": m.kind(),
                "scored": passwords.len() - unscorable,
                "unscorable": unscorable,
            });
            match out {
                Some(o) => {
                    let o = output(&o)?;
                    write_file(&o, tsv.as_bytes())?;
                    summary["out"] = json!(o);
                }
                None => summary["results"] = Value::Array(rows),
            }
            Ok(summary)
        }
        Command::Estimator {
            model,
            n,
            seed,
            model_id,
            out,
        } => {
            let m = Model::load(&model)?;
            let id = model_id.unwrap_or_else(|| {
                model.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned())
            });
            let est = build_estimator(m.scorer(), &id, n, seed)?;
            let out = output(&out)?;
            est.save(&out)?;
            Ok(json!({
                "command": "estimator",
                "model": m.kind(),
                "model_id": id,
                "n": n,
                "seed": seed,
                "table_len": est.table_len(),
                "dropped": n - est.table_len(),
                "out": out,
            }))
        }
        Command::Curve {
            model,
            est,
            test,
            gmax,
            step,
            out,
            policy: p,
        } => {
            if !(gmax >= 1.0 && gmax.is_finite()) || !(step > 0.0) {
                return Err(CliError::Usage("need --gmax >= 1 and --step > 0".into()));
            }
            let top = gmax.log10();
            let grid: Vec<f64> = (0..)
                .map(|i| i as f64 * step)
                .take_while(|&x| x <= top + 1e-9)
                .map(|x| 10f64.powf(x))
                .collect();
            let m = Model::load(&model)?;
            let est = MonteCarloEstimator::load(&input(&est))?;
            let test = corpus(&test, &p)?;
            let curve = guessing_curve(&est, m.scorer(), &test, &grid)?;
            let out = output(&out)?;
            write_file(&out, curve.to_text().as_bytes())?;
            let at = |g: f64| curve.points.iter().rev().find(|p| p.0 <= g * (1.0 + 1e-12)).map_or(0.0, |p| p.1);
            Ok(json!({
                "command": "curve",
                "test_size": curve.test_size,
                "unscorable": curve.unscorable,
                "median_relative_se": curve.median_relative_se,
                "points": curve.points.len(),
                "coverage_at_1e6": at(1e6),
                "coverage_at_1e12": at(1e12),
                "coverage_at_gmax": curve.points.last().map_or(0.0, |p| p.1),
                "out": out,
            }))
        }
        Command::Compare { a, b, points } => {
            let read = |p: &Path| -> Result<GuessingCurve> {
                let p = input(p);
                let s = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                Ok(GuessingCurve::from_text(&s)?)
            };
            let (ca, cb) = (read(&a)?, read(&b)?);
            let c = compare_curves(&ca, &cb, points)?;
            Ok(json!({
                "command": "compare",
                "a": ca.meta.model_id,
                "b": cb.meta.model_id,
                "mean_difference": c.mean_difference,
                "max_difference": c.max_difference,
                "argmax_g": c.argmax_g,
                "points": c.points,
            }))
        }
        Command::NgramTrain {
            data,
            order,
            delta,
            threshold,
            out,
            policy: p,
        } => {
            let data = corpus(&data, &p)?;
            let m = train_ngram(
                &data,
                NgramConfig {
                    order,
                    delta,
                    backoff_threshold: threshold,
                },
            )?;
            let out = output(&out)?;
            m.save(&out)?;
            Ok(json!({
                "command": "ngram-train",
                "order": order,
                "passwords": data.len(),
                "contexts": m.num_contexts(),
                "out": out,
            }))
        }
        Command::PsmExport {
            model,
            est,
            quant,
            zip,
            out,
        } => {
            let Model::Decoder(w) = Model::load(&model)? else {
                return Err(Error::Mismatch("strength meter bundles need a transformer checkpoint".into()).into());
            };
            let est = MonteCarloEstimator::load(&input(&est))?;
            let kind = match quant {
                Quant::Fp32 => Precision::Fp32,
                Quant::Fp16 => Precision::Fp16,
                Quant::Int8 => Precision::Int8,
            };
            let b = PsmBundle::build(&w, QuantizationMode { kind, zip }, est)?;
            let bytes = b.to_file_bytes()?;
            let out = output(&out)?;
            write_file(&out, &bytes)?;
            Ok(json!({
                "command": "psm-export",
                "quantization": b.manifest().quantization,
                "payload_bytes": b.payload_bytes(),
                "file_bytes": bytes.len(),
                "table_len": b.estimator().table_len(),
                "out": out,
            }))
        }
        Command::PsmCalibrate {
            bundle,
            test,
            oracle,
            target_safe,
            out,
            policy: p,
        } => {
            check_pairs(&oracle)?;
            let mut b = PsmBundle::load(&input(&bundle))?;
            let test = corpus(&test, &p)?;
            let Some(table) = oracle_table(&oracle, &test)? else {
                return Err(CliError::Usage("calibration needs at least one --oracle-model/--oracle-est pair".into()));
            };
            let f = calibrate_scaling(&mut b, &table, &test, target_safe)?;
            let m = error_matrix(&b, &table, &test)?;
            let out = output(&out)?;
            b.save(&out)?;
            Ok(json!({
                "command": "psm-calibrate",
                "scaling_factor": f,
                "target_safe": target_safe,
                "safe": m.safe,
                "unsafe": m.unsafe_errors,
                "accurate": m.accurate,
                "total": m.total,
                "out": out,
            }))
        }
        Command::PsmEval {
            bundle,
            test,
            password,
            oracle,
            out,
            policy: p,
        } => {
            check_pairs(&oracle)?;
            let b = PsmBundle::load(&input(&bundle))?;
            let test = test.map(|t| corpus(&t, &p)).transpose()?;
            let mut passwords: Vec<Vec<u8>> = test.as_ref().map(|t| t.passwords().to_vec()).unwrap_or_default();
            passwords.extend(password.into_iter().map(String::into_bytes));
            if passwords.is_empty() {
                return Err(CliError::Usage("nothing to rate: give --test or --password".into()));
            }
            let mut summary = json!({"command": "psm-eval", "scaling_factor": b.scaling_factor(), "rated": passwords.len()});
            if !oracle.models.is_empty() {
                let Some(t) = &test else {
                    return Err(CliError::Usage("an oracle needs --test".into()));
                };
                let table = oracle_table(&oracle, t)?.unwrap();
                summary["error_matrix"] = json!(error_matrix(&b, &table, t)?);
            }
            let mut rows = Vec::new();
            let mut tsv = String::from("password\tlog10_guess_number\tbin\tband\tstandard_error\n");
            for pw in &passwords {
                match psm_strength(&b, pw) {
                    Ok(r) => {
                        tsv.push_str(&format!(
                            "{}\t{}\t{}\t{}\t{}\n",
                            text(pw),
                            r.log10_guess_number,
                            r.bin,
                            band(r.guess_number),
                            r.standard_error
                        ));
                        rows.push(json!({
                            "password": text(pw),
                            "log10_guess_number": finite(r.log10_guess_number),
                            "bin": r.bin,
                            "band": band(r.guess_number),
                            "standard_error": finite(r.standard_error),
                        }));
                    }
                    Err(e) => {
                        tsv.push_str(&format!("{}\tNA\tNA\tNA\tNA\n", text(pw)));
                        rows.push(json!({"password": text(pw), "error": e.to_string()}));
                    }
                }
            }
            match out {
                Some(o) => {
                    let o = output(&o)?;
                    fs::File::create(&o)
                        .and_then(|mut f| f.write_all(tsv.as_bytes()))
                        .map_err(|e| Error::io(&o, e))?;
                    summary["out"] = json!(o);
                }
                None => summary["results"] = Value::Array(rows),
            }
            Ok(summary)
        }
    }
}
