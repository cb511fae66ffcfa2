use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use mdr_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use mdr_core::consensus::{read_annotations, read_ground_truth, run_pipeline};
use mdr_core::dataset::{
    read_candidates, read_embeddings, read_labels, write_candidates, write_embeddings, write_labels,
    EmbeddingPairRecord, PairDataset, DEFAULT_NUM_DIMS,
};
use mdr_core::eval::{
    build_dpo_pairs, evaluate, report_from_outputs, score_candidates, score_pairs, EvalMask, EvalReport,
    PairOutputs,
};
use mdr_core::head::count_parameters;
use mdr_core::synth::{generate_bundle, SynthConfig};
use mdr_core::taxonomy::{dimension_by_id, dimensions};
use mdr_core::trainer::{train, TrainConfig, TrainMask};
use mdr_core::{HeadConfig, MdrError, Result, RewardHead};
use serde_json::{json, Value};

use crate::manifest::{create_new_file, create_out_dir, write_json, RunManifest};
use crate::{
    Cli, Command, EvalArgs, FilterArgs, InspectArgs, PairsArgs, RankArgs, ScoreArgs, SweepArgs, SynthArgs,
    TrainArgs,
};

pub const EMBEDDINGS_FILE: &str = "embeddings.mdre";
pub const LABELS_FILE: &str = "labels.jsonl";

pub fn run(cli: Cli) -> Result<()> {
    let pretty = cli.pretty;
    match cli.command {
        Command::Taxonomy => taxonomy(pretty),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Score(a) => score(a),
        Command::Rank(a) => rank(a),
        Command::Filter(a) => filter(a, pretty),
        Command::Eval(a) => eval_cmd(a, pretty),
        Command::Sweep(a) => sweep(a, pretty),
        Command::Pairs(a) => pairs(a),
        Command::InspectCheckpoint(a) => inspect(a, pretty),
    }
}

fn stdout() -> BufWriter<io::StdoutLock<'static>> {
    BufWriter::new(io::stdout().lock())
}

fn emit(out: &mut impl Write, v: &Value) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(v)?)?;
    Ok(())
}

/// Prefixes I/O errors with the path that caused them.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        MdrError::Io(io) => MdrError::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn env_u64(name: &str) -> Result<Option<u64>> {
    match std::env::var(name) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| MdrError::Validation(format!("{name}={v:?} is not a non-negative integer"))),
        Err(_) => Ok(None),
    }
}

fn taxonomy(pretty: bool) -> Result<()> {
    let mut out = stdout();
    for d in dimensions() {
        if pretty {
            writeln!(
                out,
                "{:>2}  {:<34} {:<26} {:>5.1}%",
                d.id,
                d.name,
                format!("{} ({})", d.core_capability.full_name(), d.core_capability.abbreviation()),
                d.tag_ratio * 100.0
            )?;
        } else {
            emit(
                &mut out,
                &json!({
                    "id": d.id,
                    "name": d.name,
                    "short_name": d.short_name,
                    "capability": d.core_capability.abbreviation(),
                    "capability_name": d.core_capability.full_name(),
                    "tag_ratio": d.tag_ratio,
                }),
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut manifest = RunManifest::start("synth");
    let seed = match a.seed {
        Some(s) => s,
        None => env_u64("MDR_SEED")?.unwrap_or(0),
    };
    let config = SynthConfig {
        n_samples: a.n,
        d_in: a.d_in,
        top_k: a.k,
        noise: a.noise,
        tie_band: a.tie_band,
        group_size: a.group_size,
        seed,
        ..SynthConfig::default()
    };
    config.validate()?;
    if a.candidates > 0 && a.n_candidates < 2 {
        return Err(MdrError::Validation("--n-candidates must be at least 2".into()));
    }
    let bundle = generate_bundle(&config, a.holdout, a.candidates, a.n_candidates)?;
    let dir = create_out_dir(&a.out)?;

    let mut write_split = |ds: &PairDataset, emb: &str, lab: &str| -> Result<()> {
        let (e, l) = (dir.join(emb), dir.join(lab));
        write_embeddings(&ds.records, &e)?;
        write_labels(&ds.labels, &l)?;
        manifest.output(&e);
        manifest.output(&l);
        Ok(())
    };
    write_split(&bundle.train, EMBEDDINGS_FILE, LABELS_FILE)?;
    if let Some(h) = &bundle.holdout {
        write_split(h, "holdout.mdre", "holdout_labels.jsonl")?;
    }
    if let Some((sets, rewards)) = &bundle.candidates {
        let c = dir.join("candidates.mdrc");
        write_candidates(sets, &c)?;
        let r = dir.join("candidate_rewards.jsonl");
        let mut w = create_new_file(&r)?;
        for (s, rw) in sets.iter().zip(rewards) {
            emit(&mut w, &json!({"prompt_id": s.prompt_id, "teacher_rewards": rw}))?;
        }
        w.flush()?;
        manifest.output(&c);
        manifest.output(&r);
    }
    let t = dir.join("teacher.json");
    write_json(&t, &bundle.teacher.metadata())?;
    manifest.output(&t);
    manifest.seed = Some(seed);
    manifest.config = json!({
        "synth": config,
        "holdout": a.holdout,
        "candidates": a.candidates,
        "n_candidates": a.n_candidates,
    });
    manifest.finish(&dir.join("manifest.json"))
}

fn load_pairs(dir: &Path) -> Result<(PairDataset, PathBuf, PathBuf)> {
    let (e, l) = (dir.join(EMBEDDINGS_FILE), dir.join(LABELS_FILE));
    let ds = PairDataset::join(at(&e, read_embeddings(&e))?, at(&l, read_labels(&l, DEFAULT_NUM_DIMS))?)?;
    Ok((ds, e, l))
}

/// Resolves the training configuration: flags beat the config file, which
/// beats the built-in defaults. Environment variables fill in seed and
/// thread count when neither a flag nor the file sets them.
fn resolve_train_config(a: &TrainArgs, data_d_in: usize) -> Result<(HeadConfig, TrainConfig)> {
    let file: Value = match &a.config {
        Some(p) => serde_json::from_str(&at(p, fs::read_to_string(p).map_err(MdrError::from))?)
            .map_err(|e| MdrError::Validation(format!("{}: {e}", p.display())))?,
        None => json!({}),
    };
    if let Some(unknown) = file
        .as_object()
        .and_then(|o| o.keys().find(|k| !matches!(k.as_str(), "head" | "train")))
    {
        return Err(MdrError::Validation(format!("unknown config section {unknown:?}")));
    }
    let head_v = file.get("head").cloned().unwrap_or(json!({}));
    let train_v = file.get("train").cloned().unwrap_or(json!({}));
    let mut head: HeadConfig = serde_json::from_value(head_v.clone())?;
    if head_v.get("d_in").is_none() {
        head.d_in = data_d_in;
    } else if head.d_in != data_d_in {
        return Err(MdrError::Validation(format!(
            "config d_in = {} but the training embeddings have d_in = {data_d_in}",
            head.d_in
        )));
    }
    let mut tc: TrainConfig = serde_json::from_value(train_v.clone())?;
    if let Some(s) = a.seed {
        tc.seed = s;
    } else if train_v.get("seed").is_none() {
        tc.seed = env_u64("MDR_SEED")?.unwrap_or(tc.seed);
    }
    if let Some(t) = a.threads {
        tc.threads = t;
    } else if train_v.get("threads").is_none() {
        tc.threads = env_u64("MDR_THREADS")?.map_or(tc.threads, |t| t as usize);
    }
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(b) = a.batch {
        tc.global_batch = b;
    }
    if let Some(lr) = a.lr {
        tc.base_lr = lr;
    }
    if let Some(m) = &a.mask_source {
        tc.mask_source = match m.as_str() {
            "given" => TrainMask::Given,
            "predicted" => TrainMask::Predicted,
            other => {
                return Err(MdrError::Validation(format!(
                    "--mask-source must be given or predicted, not {other:?}"
                )))
            }
        };
    }
    head.validate()?;
    tc.validate()?;
    Ok((head, tc))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut manifest = RunManifest::start("train");
    let (data, e, l) = load_pairs(&a.data)?;
    manifest.input(&e)?;
    manifest.input(&l)?;
    let validation = match &a.validation {
        Some(dir) => {
            let (v, ve, vl) = load_pairs(dir)?;
            manifest.input(&ve)?;
            manifest.input(&vl)?;
            Some(v)
        }
        None => None,
    };
    if let Some(c) = &a.config {
        manifest.input(c)?;
    }
    let (head_cfg, tc) = resolve_train_config(&a, data.d_in())?;
    let dir = create_out_dir(&a.out)?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = create_new_file(&metrics_path)?;
    let mut write_err: Option<io::Error> = None;
    let head = RewardHead::init(head_cfg.clone(), tc.seed)?;
    let outcome = train(head, &data, validation.as_ref(), &tc, |s| {
        if write_err.is_none() {
            let line = serde_json::to_string(s).expect("step record serializes");
            if let Err(e) = writeln!(metrics, "{line}") {
                write_err = Some(e);
            }
        }
    });
    metrics.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let outcome = outcome?;
    manifest.output(&metrics_path);

    let total_steps = outcome.steps.len() as u64;
    let mut meta = CheckpointMeta::new(head_cfg, Some(tc.seed));
    meta.step = total_steps;
    meta.epoch = tc.epochs;
    meta.train_loss = outcome.epochs.last().map(|e| e.train_loss.total);
    let final_path = dir.join("final.mdrw");
    save_checkpoint(&outcome.final_head, &meta, &final_path)?;
    manifest.output(&final_path);

    let per_epoch = tc.steps_per_epoch(data.len()) as u64;
    let best = &outcome.epochs[outcome.best_epoch];
    meta.epoch = outcome.best_epoch + 1;
    meta.step = per_epoch * meta.epoch as u64;
    meta.train_loss = Some(best.train_loss.total);
    let best_path = dir.join("best.mdrw");
    save_checkpoint(&outcome.best_head, &meta, &best_path)?;
    manifest.output(&best_path);

    let summary_path = dir.join("summary.json");
    write_json(
        &summary_path,
        &json!({
            "steps": total_steps,
            "best_epoch": outcome.best_epoch,
            "selection": if validation.is_some() { "validation_loss" } else { "train_loss" },
            "epochs": outcome.epochs,
        }),
    )?;
    manifest.output(&summary_path);
    manifest.seed = Some(tc.seed);
    manifest.config = json!({"head": &meta.config, "train": tc});
    manifest.finish(&dir.join("manifest.json"))
}

fn load_model(path: &Path) -> Result<RewardHead> {
    Ok(at(path, load_checkpoint(path))?.0)
}

fn check_width(head: &RewardHead, records: &[EmbeddingPairRecord]) -> Result<()> {
    if let Some(r) = records.first() {
        if r.d_in() != head.config.d_in {
            return Err(MdrError::Validation(format!(
                "model expects d_in = {} but the embeddings have d_in = {}",
                head.config.d_in,
                r.d_in()
            )));
        }
    }
    Ok(())
}

fn dim_name(k: usize) -> &'static str {
    dimension_by_id(k).map_or("unknown", |d| d.name)
}

fn side_json(o: &mdr_core::HeadOutputs) -> Value {
    let active: Vec<Value> = o
        .active_dims()
        .into_iter()
        .map(|k| {
            json!({
                "id": k,
                "name": dim_name(k),
                "alpha": o.weights[k],
                "score": mdr_core::head::logistic(o.scores[k]),
            })
        })
        .collect();
    json!({ "reward": o.reward, "active": active })
}

fn pair_json(p: &PairOutputs, explain: bool) -> Value {
    let mut v = json!({
        "id": p.id,
        "mask": p.a.active_dims(),
        "a": side_json(&p.a),
        "b": side_json(&p.b),
    });
    if explain {
        let dims: Vec<Value> = (0..p.a.scores.len())
            .map(|k| {
                json!({
                    "id": k,
                    "name": dim_name(k),
                    "relevance": p.a.relevance_probs[k],
                    "score_a": mdr_core::head::logistic(p.a.scores[k]),
                    "score_b": mdr_core::head::logistic(p.b.scores[k]),
                })
            })
            .collect();
        v["explain"] = Value::Array(dims);
    }
    v
}

fn score(a: ScoreArgs) -> Result<()> {
    let mut manifest = RunManifest::start("score");
    let head = load_model(&a.model)?;
    let records = at(&a.data, read_embeddings(&a.data))?;
    check_width(&head, &records)?;
    let k = a.k.unwrap_or(head.config.top_k);
    let outputs = score_pairs(&head, &records, EvalMask::TopK(k))?;
    let dir = a.out.as_ref().map(|d| create_out_dir(d)).transpose()?;
    match &dir {
        Some(dir) => {
            let p = dir.join("scores.jsonl");
            let mut w = create_new_file(&p)?;
            for o in &outputs {
                emit(&mut w, &pair_json(o, a.explain))?;
            }
            w.flush()?;
            manifest.output(&p);
            manifest.input(&a.model)?;
            manifest.input(&a.data)?;
            manifest.config = json!({"k": k, "explain": a.explain});
            manifest.finish(&dir.join("manifest.json"))
        }
        None => {
            let mut out = stdout();
            for o in &outputs {
                emit(&mut out, &pair_json(o, a.explain))?;
            }
            out.flush()?;
            Ok(())
        }
    }
}

/// "A", "B" or "tie" under a strict comparison.
pub fn winner(reward_a: f64, reward_b: f64) -> &'static str {
    if reward_a > reward_b {
        "A"
    } else if reward_b > reward_a {
        "B"
    } else {
        "tie"
    }
}

fn rank(a: RankArgs) -> Result<()> {
    let head = load_model(&a.model)?;
    let records = at(&a.data, read_embeddings(&a.data))?;
    check_width(&head, &records)?;
    let k = a.k.unwrap_or(head.config.top_k);
    let (records, labels) = match &a.labels {
        Some(l) => {
            let ds = PairDataset::join(records, at(l, read_labels(l, DEFAULT_NUM_DIMS))?)?;
            (ds.records, Some(ds.labels))
        }
        None => (records, None),
    };
    let outputs = score_pairs(&head, &records, EvalMask::TopK(k))?;
    let mut out = stdout();
    for o in &outputs {
        emit(
            &mut out,
            &json!({
                "id": o.id,
                "reward_a": o.a.reward,
                "reward_b": o.b.reward,
                "winner": winner(o.a.reward, o.b.reward),
            }),
        )?;
    }
    if let Some(labels) = labels {
        let r = report_from_outputs(&outputs, &labels, Some(k))?;
        emit(
            &mut out,
            &json!({
                "accuracy": r.overall_accuracy,
                "evaluated": r.evaluated,
                "excluded_ties": r.excluded_ties,
            }),
        )?;
    }
    out.flush()?;
    Ok(())
}

fn filter(a: FilterArgs, pretty: bool) -> Result<()> {
    let mut manifest = RunManifest::start("filter");
    let anns = at(&a.annotations, read_annotations(&a.annotations))?;
    let gt = at(&a.ground_truth, read_ground_truth(&a.ground_truth))?;
    manifest.input(&a.annotations)?;
    manifest.input(&a.ground_truth)?;
    let (retained, report) = run_pipeline(&anns, &gt)?;
    let dir = create_out_dir(&a.out)?;
    let labels = dir.join(LABELS_FILE);
    write_labels(&retained, &labels)?;
    let report_path = dir.join("report.json");
    write_json(&report_path, &report)?;
    manifest.output(&labels);
    manifest.output(&report_path);
    manifest.config = json!({"top3_rule": report.top3_rule, "consolidation_rule": report.consolidation_rule});
    manifest.finish(&dir.join("manifest.json"))?;
    let mut out = stdout();
    if pretty {
        write!(out, "{}", report.render())?;
    } else {
        emit(
            &mut out,
            &json!({
                "input": report.input_count,
                "dim_agreed": report.dim_agreed_count,
                "retained": report.retained_count,
                "retention": mdr_core::consensus::format_percent(report.retained_count, report.input_count),
                "consistency_histogram": report.consistency_histogram,
            }),
        )?;
    }
    out.flush()?;
    Ok(())
}

fn load_eval_set(head: &RewardHead, data: &Path, labels: &Path) -> Result<PairDataset> {
    let records = at(data, read_embeddings(data))?;
    check_width(head, &records)?;
    PairDataset::join(records, at(labels, read_labels(labels, head.config.num_dims))?)
}

fn print_report(out: &mut impl Write, r: &EvalReport, pretty: bool) -> Result<()> {
    if !pretty {
        return emit(out, &serde_json::to_value(r)?);
    }
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    writeln!(
        out,
        "k={:<3} overall {:.4}  macro {}  acc+ {}  jaccard {:.4}  per-dim {}  (pairs {}, ties excluded {})",
        r.k.map_or("-".into(), |k| k.to_string()),
        r.overall_accuracy,
        opt(r.macro_accuracy),
        opt(r.acc_plus),
        r.mean_jaccard,
        opt(r.per_dimension_accuracy),
        r.evaluated,
        r.excluded_ties
    )?;
    Ok(())
}

fn eval_cmd(a: EvalArgs, pretty: bool) -> Result<()> {
    let head = load_model(&a.model)?;
    let data = load_eval_set(&head, &a.data, &a.labels)?;
    let report = evaluate(&head, &data, a.k.unwrap_or(head.config.top_k))?;
    let mut out = stdout();
    print_report(&mut out, &report, pretty)?;
    if pretty {
        for (c, acc) in &report.per_category {
            writeln!(out, "  {c:<12} {acc:.4}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Parses `a..b` or `a..=b` (both inclusive) or a single `k`.
pub fn parse_k_range(s: &str, num_dims: usize) -> Result<Vec<usize>> {
    let bad = || MdrError::Validation(format!("bad --k-range {s:?}; expected e.g. 1..21"));
    let (lo, hi) = match s.split_once("..") {
        Some((lo, hi)) => {
            let hi = hi.strip_prefix('=').unwrap_or(hi);
            (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?)
        }
        None => {
            let k = s.trim().parse().map_err(|_| bad())?;
            (k, k)
        }
    };
    if lo == 0 || lo > hi || hi > num_dims {
        return Err(MdrError::Validation(format!(
            "--k-range {s:?} must lie within 1..{num_dims}"
        )));
    }
    Ok((lo..=hi).collect())
}

fn sweep(a: SweepArgs, pretty: bool) -> Result<()> {
    let head = load_model(&a.model)?;
    let data = load_eval_set(&head, &a.data, &a.labels)?;
    let ks = parse_k_range(&a.k_range, head.config.num_dims)?;
    let mut out = stdout();
    for k in ks {
        let r = evaluate(&head, &data, k)?;
        print_report(&mut out, &r, pretty)?;
    }
    out.flush()?;
    Ok(())
}

fn pairs(a: PairsArgs) -> Result<()> {
    let mut manifest = RunManifest::start("pairs");
    let head = load_model(&a.model)?;
    let sets = at(&a.candidates, read_candidates(&a.candidates))?;
    if let Some(s) = sets.iter().find(|s| s.h_q.len() != head.config.d_in) {
        return Err(MdrError::Validation(format!(
            "model expects d_in = {} but the candidates have d_in = {}",
            head.config.d_in,
            s.h_q.len()
        )));
    }
    let k = a.k.unwrap_or(head.config.top_k);
    let rewards = score_candidates(&head, &sets, k)?;
    let keyed: Vec<(u64, Vec<f64>)> = sets.iter().map(|s| s.prompt_id).zip(rewards).collect();
    let selection = build_dpo_pairs(&keyed)?;
    for id in &selection.degenerate {
        eprintln!("warning: prompt {id} dropped, all candidates received the same reward");
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = create_new_file(&a.out)?;
    for p in &selection.pairs {
        emit(&mut w, &serde_json::to_value(p)?)?;
    }
    w.flush()?;
    manifest.input(&a.model)?;
    manifest.input(&a.candidates)?;
    manifest.output(&a.out);
    manifest.config = json!({"k": k, "degenerate_dropped": selection.degenerate.len()});
    let mut name = a.out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    manifest.finish(&a.out.with_file_name(name))
}

fn inspect(a: InspectArgs, pretty: bool) -> Result<()> {
    let (head, meta) = at(&a.path, load_checkpoint(&a.path))?;
    let counts = count_parameters(&head.config);
    let mut out = stdout();
    if pretty {
        writeln!(out, "d_in {}  dims {}  top_k {}", head.config.d_in, head.config.num_dims, head.config.top_k)?;
        for (name, n, widths) in [
            ("dimension", counts.dimension, &head.config.dim_widths),
            ("scoring", counts.scoring, &head.config.score_widths),
            ("weighting", counts.weighting, &head.config.weight_widths),
        ] {
            writeln!(out, "{name:<10} {n:>12}  widths {widths:?}")?;
        }
        writeln!(out, "{:<10} {:>12}", "total", counts.total)?;
        writeln!(out, "activation {}  seed {:?}  step {}", meta.activation, meta.seed, meta.step)?;
    } else {
        emit(
            &mut out,
            &json!({"config": head.config, "parameters": counts, "metadata": meta}),
        )?;
    }
    out.flush()?;
    Ok(())
}
