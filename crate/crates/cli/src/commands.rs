use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use patlab_core::causal::{tde_chain_check, premise_scm, random_scm, TdeReport};
use patlab_core::checkpoint::Checkpoint;
use patlab_core::kv::{self, KvMap};
use patlab_core::metrics::{
    average_precision, mean_average_precision, metrics_report, pair_scan, pr_f1_suite, PredictionSet, ScoreKind,
};
use patlab_core::patching::{predict_fused, predict_plain, PredictionTable};
use patlab_core::rng::substream;
use patlab_core::synthgen::{generate_dataset, load_dataset, save_dataset, Dataset};
use patlab_core::training::{join_int, split_int, train, EpochLog, TrainMode};

use crate::config::{self, get};
use crate::{CausalArgs, Cli, CliError, Command, EvalArgs, InferArgs, SynthArgs, TrainArgs};

pub const TRAIN_FILE: &str = "train.dsb";
pub const TEST_FILE: &str = "test.dsb";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const PAIRS_FILE: &str = "pairs.csv";
pub const STEPWISE_FILE: &str = "stepwise.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const CAUSAL_FILE: &str = "causal.csv";

/// Residual bound for constructed models.
const CHAIN_TOL: f64 = 1e-10;
const PREMISE_ATTEMPTS: usize = 100_000;

fn member_file(class: usize) -> String {
    format!("model_class_{}.ckpt", class + 1)
}

fn opt<T: ToString>(overrides: &mut Vec<(String, String)>, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        overrides.push((key.to_string(), v.to_string()));
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.global.set.clone();
    opt(&mut overrides, "seed", &cli.global.seed);
    let out = cli.global.out.clone();
    match &cli.command {
        Command::Synth(a) => {
            opt(&mut overrides, "data.n_train", &a.n_train);
            opt(&mut overrides, "data.n_test", &a.n_test);
        }
        Command::Train(a) => {
            opt(&mut overrides, "mode", &a.mode);
            opt(&mut overrides, "train.epochs", &a.epochs);
            opt(&mut overrides, "train.lr", &a.lr);
            opt(&mut overrides, "train.batch", &a.batch);
            opt(&mut overrides, "loss.kind", &a.loss);
            opt(&mut overrides, "fusion.tau", &a.tau);
            opt(&mut overrides, "fusion.lambda", &a.lambda);
            opt(&mut overrides, "train.ema", &a.ema);
        }
        Command::Infer(a) => {
            opt(&mut overrides, "infer.mode", &a.mode);
            opt(&mut overrides, "fusion.lambda", &a.lambda);
            opt(&mut overrides, "fusion.tau", &a.tau);
            opt(&mut overrides, "fusion.weight_source", &a.weight_source);
        }
        Command::Eval(a) => {
            opt(&mut overrides, "eval.threshold", &a.threshold);
            opt(&mut overrides, "eval.co_threshold", &a.co_threshold);
        }
        Command::CausalCheck(a) => {
            opt(&mut overrides, "causal.trials", &a.trials);
            opt(&mut overrides, "causal.constructed", &a.constructed);
            opt(&mut overrides, "causal.mediators", &a.mediators);
        }
    }
    let map = config::resolve(cli.global.config.as_deref(), &overrides)?;
    fs::create_dir_all(&out)?;
    match &cli.command {
        Command::Synth(a) => synth(&map, &out, a),
        Command::Train(a) => train_cmd(&map, &out, a),
        Command::Infer(a) => infer(&map, &out, a),
        Command::Eval(a) => eval(&map, &out, a),
        Command::CausalCheck(a) => causal_check(&map, &out, a),
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn synth(map: &KvMap, out: &Path, _args: &SynthArgs) -> Result<(), CliError> {
    let cfg = config::synth_config(map)?;
    let n_train: usize = get(map, "data.n_train")?;
    let n_test: usize = get(map, "data.n_test")?;
    let seed: u64 = get(map, "seed")?;
    let (train_set, test_set) = generate_dataset(&cfg, n_train, n_test, seed)?;
    save_dataset(&train_set, &out.join(TRAIN_FILE))?;
    save_dataset(&test_set, &out.join(TEST_FILE))?;
    config::write_snapshot(out, map, "synth", &[])?;

    let counts = train_set.positives_per_class();
    println!("class\tmarginal");
    for (k, c) in counts.iter().enumerate() {
        println!("{}\t{}", k + 1, *c as f64 / n_train as f64);
    }
    println!("coupling\tp_b_given_a");
    for c in &cfg.spec.couplings {
        let p = train_set
            .conditional(c.from, c.to)
            .map_or_else(|| "NA".to_string(), |v| v.to_string());
        println!("{}>{}\t{}", c.from + 1, c.to + 1, p);
    }
    Ok(())
}

fn load_split(dir: &Path, name: &str) -> Result<Option<Dataset>, CliError> {
    let path = dir.join(name);
    if path.exists() {
        Ok(Some(load_dataset(&path)?))
    } else {
        Ok(None)
    }
}

fn train_cmd(map: &KvMap, out: &Path, args: &TrainArgs) -> Result<(), CliError> {
    let mode = config::train_mode(map)?;
    let cfg = config::train_config(map)?;
    let train_set = load_split(&args.data, TRAIN_FILE)?
        .ok_or_else(|| CliError::Usage(format!("no {TRAIN_FILE} in {}", args.data.display())))?;
    let test_set = if args.no_eval {
        None
    } else {
        load_split(&args.data, TEST_FILE)?
    };
    let resume = match &args.resume {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let mut paths = vec![("data", show(&args.data))];
    if let Some(p) = &args.resume {
        paths.push(("resume", show(p)));
    }
    config::write_snapshot(out, map, "train", &paths)?;

    let run = train(mode, &train_set, &cfg, test_set.as_ref(), resume.as_ref())?;
    let mut log = BufWriter::new(fs::File::create(out.join(LOG_FILE))?);
    writeln!(log, "{}", EpochLog::CSV_HEADER)?;
    println!("{}", EpochLog::CSV_HEADER);
    for e in &run.log {
        writeln!(log, "{}", e.csv_row())?;
        println!("{}", e.csv_row());
    }
    log.flush()?;

    if mode == TrainMode::Int {
        for member in split_int(&run.checkpoint)? {
            let k = member.int_class.expect("member class");
            member.save(&out.join(member_file(k)))?;
        }
    } else {
        run.checkpoint.save(&out.join(MODEL_FILE))?;
    }
    Ok(())
}

/// A checkpoint file, or a directory with `model.ckpt` or one file per
/// `int` member.
fn load_model(path: &Path) -> Result<Checkpoint, CliError> {
    if path.is_file() {
        let ck = Checkpoint::load(path)?;
        if ck.int_class.is_some() {
            return Err(CliError::Usage(format!(
                "{} holds a single int member; pass its directory instead",
                path.display()
            )));
        }
        return Ok(ck);
    }
    let single = path.join(MODEL_FILE);
    if single.is_file() {
        return Ok(Checkpoint::load(&single)?);
    }
    let mut members = Vec::new();
    while path.join(member_file(members.len())).is_file() {
        members.push(Checkpoint::load(&path.join(member_file(members.len())))?);
    }
    if members.is_empty() {
        return Err(CliError::Usage(format!("no checkpoint found at {}", path.display())));
    }
    Ok(join_int(&members)?)
}

fn infer(map: &KvMap, out: &Path, args: &InferArgs) -> Result<(), CliError> {
    let ck = load_model(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let params = ck.eval_params();
    if params.dims.side != data.side || params.dims.classes != data.classes {
        return Err(CliError::Core(patlab_core::Error::Shape(format!(
            "checkpoint expects side {} and {} classes, dataset has side {} and {} classes",
            params.dims.side, params.dims.classes, data.side, data.classes
        ))));
    }
    let images = data.pixels(&(0..data.len()).collect::<Vec<_>>());
    let table = match map["infer.mode"].as_str() {
        "plain" => predict_plain(params, images.view())?,
        "pat-i" => predict_fused(params, images.view(), &config::fusion_config(map, ck.mode)?)?,
        other => return Err(CliError::Usage(format!("unknown inference mode '{other}'"))),
    };
    config::write_snapshot(
        out,
        map,
        "infer",
        &[("checkpoint", show(&args.checkpoint)), ("data", show(&args.data))],
    )?;
    let mut w = BufWriter::new(fs::File::create(out.join(PREDICTIONS_FILE))?);
    table.write_csv(&mut w)?;
    w.flush()?;
    println!("wrote {} rows to {}", table.len(), show(&out.join(PREDICTIONS_FILE)));
    Ok(())
}

fn read_predictions(path: &PathBuf) -> Result<PredictionTable, CliError> {
    Ok(PredictionTable::read_csv(BufReader::new(fs::File::open(path)?))?)
}

fn class_aps(scores: &Array2<f64>, labels: &Array2<u8>) -> Vec<Option<f64>> {
    (0..labels.ncols())
        .map(|k| average_precision(scores.column(k), labels.column(k)).ok())
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

fn eval(map: &KvMap, out: &Path, args: &EvalArgs) -> Result<(), CliError> {
    let table = read_predictions(&args.predictions)?;
    let data = load_dataset(&args.data)?;
    let labels = data.label_matrix();
    if table.image_logits.dim() != labels.dim() {
        return Err(CliError::Core(patlab_core::Error::Shape(format!(
            "predictions are {:?} but the dataset is {:?}",
            table.image_logits.dim(),
            labels.dim()
        ))));
    }
    let threshold: f64 = get(map, "eval.threshold")?;
    let co_threshold: f64 = get(map, "eval.co_threshold")?;
    let preds = PredictionSet::new(table.scores(), labels.clone(), ScoreKind::Probability, threshold)?;
    let map_report = mean_average_precision(&preds)?;
    let prf = pr_f1_suite(&preds);
    let mut report = metrics_report(&map_report, &prf, threshold);
    report.insert("n".into(), data.len().to_string());
    report.insert(
        "scores".into(),
        if table.fusion.is_some() { "tde" } else { "image" }.into(),
    );
    fs::write(out.join(METRICS_FILE), kv::format(&report))?;
    print!("{}", kv::format(&report));

    let pairs = pair_scan(&preds, co_threshold);
    let mut w = BufWriter::new(fs::File::create(out.join(PAIRS_FILE))?);
    pairs.write_csv(&mut w)?;
    w.flush()?;

    if let Some(f) = &table.fusion {
        let image = class_aps(&table.image_logits, &labels);
        let patch = class_aps(&f.aggregated, &labels);
        let fused = class_aps(&f.tde, &labels);
        let mut w = BufWriter::new(fs::File::create(out.join(STEPWISE_FILE))?);
        writeln!(w, "class,ap_image,ap_patch,ap_tde,gain_over_image,gain_over_patch")?;
        for k in 0..labels.ncols() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                k + 1,
                cell(image[k]),
                cell(patch[k]),
                cell(fused[k]),
                cell(diff(fused[k], image[k])),
                cell(diff(fused[k], patch[k]))
            )?;
        }
        w.flush()?;
    }

    let mut paths = vec![("predictions", show(&args.predictions)), ("data", show(&args.data))];
    if let Some(other) = &args.compare {
        let other_table = read_predictions(other)?;
        if other_table.image_logits.dim() != labels.dim() {
            return Err(CliError::Core(patlab_core::Error::Shape(
                "compared predictions differ in shape".into(),
            )));
        }
        let base = class_aps(&table.scores(), &labels);
        let alt = class_aps(&other_table.scores(), &labels);
        let mut w = BufWriter::new(fs::File::create(out.join(COMPARE_FILE))?);
        writeln!(w, "class,ap_base,ap_other,delta")?;
        for k in 0..labels.ncols() {
            writeln!(w, "{},{},{},{}", k + 1, cell(base[k]), cell(alt[k]), cell(diff(alt[k], base[k])))?;
        }
        w.flush()?;
        paths.push(("compare", show(other)));
    }
    config::write_snapshot(out, map, "eval", &paths)?;
    Ok(())
}

fn report_row(kind: &str, index: usize, class: usize, r: &TdeReport) -> String {
    format!(
        "{kind},{index},{},{},{},{},{},{},{},{},{},{}",
        class + 1,
        r.tde_direct,
        r.term1,
        r.term2,
        r.alpha,
        r.beta,
        cell(r.lambda),
        r.premise_residual,
        r.chain_residual,
        r.degenerate
    )
}

fn causal_check(map: &KvMap, out: &Path, _args: &CausalArgs) -> Result<(), CliError> {
    let seed: u64 = get(map, "seed")?;
    let trials: usize = get(map, "causal.trials")?;
    let constructed: usize = get(map, "causal.constructed")?;
    let mediators: usize = get(map, "causal.mediators")?;
    let classes: usize = get(map, "causal.classes")?;
    config::write_snapshot(out, map, "causal-check", &[])?;

    let header = "kind,index,class,tde,term1,term2,alpha,beta,lambda,premise_residual,chain_residual,degenerate";
    let mut w = BufWriter::new(fs::File::create(out.join(CAUSAL_FILE))?);
    writeln!(w, "{header}")?;
    println!("{header}");
    let emit = |w: &mut BufWriter<fs::File>, line: String| -> std::io::Result<()> {
        println!("{line}");
        writeln!(w, "{line}")
    };

    let mut rng = substream(seed, "causal/random");
    for i in 0..trials {
        let scm = random_scm(&mut rng, classes, mediators);
        if !(scm.joint[1][0] > 0.0) {
            continue;
        }
        for k in 0..classes {
            emit(&mut w, report_row("random", i, k, &tde_chain_check(&scm, k)?))?;
        }
    }
    let mut rng = substream(seed, "causal/constructed");
    let (mut checked, mut degenerate, mut failures) = (0usize, 0usize, 0usize);
    let mut worst: f64 = 0.0;
    for i in 0..constructed {
        let scm = premise_scm(&mut rng, classes, mediators, PREMISE_ATTEMPTS)?;
        for k in 0..classes {
            let r = tde_chain_check(&scm, k)?;
            emit(&mut w, report_row("constructed", i, k, &r))?;
            if r.degenerate {
                degenerate += 1;
                continue;
            }
            checked += 1;
            worst = worst.max(r.chain_residual);
            if !(r.chain_residual <= CHAIN_TOL) {
                failures += 1;
            }
        }
    }
    w.flush()?;
    eprintln!(
        "constructed: {checked} checked, {degenerate} degenerate, {failures} above {CHAIN_TOL}, max residual {worst}"
    );
    if failures > 0 {
        return Err(CliError::Check(format!(
            "{failures} constructed models exceed the chain residual bound"
        )));
    }
    Ok(())
}
