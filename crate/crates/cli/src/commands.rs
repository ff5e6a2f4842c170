//! Subcommand implementations. Each reads a resolved configuration and
//! writes its outputs under `cfg.out`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use vac_core::attack::{attack_dataset, pgd_parallel, AttackSummary};
use vac_core::data::{synthetic_blobs, Dataset, Split};
use vac_core::detect::{detection_report, DetectionReport, ErrorSet};
use vac_core::nn::{checkpoint_load, checkpoint_save};
use vac_core::vac::{evaluate_accuracy, predict_classes};
use vac_core::vae::{reconstruct, reconstruction_errors, train, ReconstructMode, LOG_HEADER};
use vac_core::{rng, verify, Source, VacModel};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::output::{
    check_shard_matches, create_dir, fmt_f64, read_csv, read_shard, shard_path, split_name, write_csv, write_pgm, ShardWriter,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.vacb";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const MANIFEST_FILE: &str = "adv/manifest.csv";
pub const DETECTION_FILE: &str = "detection.csv";
pub const RECON_ERROR_FILE: &str = "recon_error.csv";

/// Loads one split as configured (limits applied). The detector-fit subset
/// of the training split is a separate call with its own limit.
pub fn load_split(cfg: &ExperimentConfig, split: Split, limit: Option<usize>) -> CliResult<Dataset> {
    let source = match cfg.data.source {
        DataSource::Mnist => Source::Mnist,
        DataSource::Fmnist => Source::Fmnist,
        DataSource::Synthetic => {
            let key = rng::mix_seed(cfg.seed, &[split as u64]);
            let n = limit.map_or(cfg.data.synthetic_count, |l| l.min(cfg.data.synthetic_count));
            let n = n + n % 2;
            let mut ds = synthetic_blobs(n, cfg.data.synthetic_side, 0.05, key)?;
            ds.split = split;
            return Ok(ds);
        }
    };
    Ok(Dataset::load_dir(&cfg.data.dir, split, source, limit)?)
}

pub fn train_set(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    load_split(cfg, Split::Train, cfg.data.train_limit)
}

pub fn test_set(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    load_split(cfg, Split::Test, cfg.data.test_limit)
}

/// Leading training samples used to fit detectors.
pub fn detector_fit_set(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let limit = cfg.data.detector_train_limit.min(cfg.data.train_limit.unwrap_or(usize::MAX));
    load_split(cfg, Split::Train, Some(limit))
}

pub fn fresh_model(cfg: &ExperimentConfig) -> CliResult<VacModel> {
    Ok(VacModel::new(cfg.arch_config(cfg.image_side(), cfg.num_classes()), cfg.seed)?)
}

pub fn checkpoint_path(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| cfg.out.join(CHECKPOINT_FILE), Path::to_path_buf)
}

/// Builds the configured network and loads `path` into it.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> CliResult<VacModel> {
    let mut model = fresh_model(cfg)?;
    let saved = checkpoint_load(path).map_err(|e| match e {
        vac_core::VacError::Io(io) => CliError::io(format!("reading checkpoint {}", path.display()), io),
        other => CliError::from(other),
    })?;
    model.params.load_values_from(&saved).map_err(|e| {
        CliError::Validation(format!(
            "checkpoint {} does not fit the configured model (latent size, classes, widths): {e}",
            path.display()
        ))
    })?;
    Ok(model)
}

fn write_config(cfg: &ExperimentConfig) -> CliResult<()> {
    create_dir(&cfg.out)?;
    let path = cfg.out.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(path.display(), e))
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOutcome {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Trains a model and writes the checkpoint and the per-iteration log.
pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<TrainOutcome> {
    write_config(cfg)?;
    let train_ds = train_set(cfg)?;
    let test_ds = test_set(cfg)?;
    let mut model = fresh_model(cfg)?;
    let log_path = cfg.out.join(TRAIN_LOG_FILE);
    let mut log_file = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| CliError::io(log_path.display(), e))?);
    writeln!(log_file, "{LOG_HEADER}")?;
    let mut write_err = None;
    train(&train_ds, &mut model, &cfg.train_config(), &cfg.optimizer_config(), true, |entry| {
        if write_err.is_none() {
            if let Err(e) = writeln!(log_file, "{}", entry.csv_row()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(log_path.display(), e));
    }
    log_file.flush()?;
    checkpoint_save(&model.params, cfg.out.join(CHECKPOINT_FILE))?;
    let outcome = TrainOutcome {
        train_accuracy: evaluate_accuracy(&train_ds, &model)?,
        test_accuracy: evaluate_accuracy(&test_ds, &model)?,
    };
    println!(
        "final clean accuracy: train {:.4}, test {:.4}",
        outcome.train_accuracy, outcome.test_accuracy
    );
    Ok(outcome)
}

fn attack_split(
    cfg: &ExperimentConfig,
    model: &VacModel,
    dataset: &Dataset,
    manifest: &mut Vec<Vec<String>>,
) -> CliResult<Vec<AttackSummary>> {
    let eps = cfg.epsilons();
    let mut writer: Option<(f64, ShardWriter)> = None;
    let mut paths = Vec::new();
    let summaries = attack_dataset(dataset, model, &cfg.attack_config(), &eps, cfg.attack.wave, |e, batch, pred| {
        if writer.as_ref().is_none_or(|(we, _)| *we != e) {
            if let Some((_, w)) = writer.take() {
                w.finish().map_err(to_core)?;
            }
            let rel = shard_path(dataset.split, e);
            paths.push(rel.clone());
            let w = ShardWriter::create(&cfg.out.join(&rel), dataset.len(), dataset.image_shape()).map_err(to_core)?;
            writer = Some((e, w));
        }
        let (_, w) = writer.as_mut().expect("open shard");
        w.append(&batch.images, &batch.labels, pred).map_err(to_core)
    })?;
    if let Some((_, w)) = writer.take() {
        w.finish()?;
    }
    for (s, rel) in summaries.iter().zip(&paths) {
        manifest.push(vec![
            split_name(dataset.split).to_string(),
            fmt_f64(s.epsilon),
            rel.display().to_string(),
            s.count.to_string(),
            fmt_f64(s.accuracy),
        ]);
    }
    Ok(summaries)
}

fn to_core(e: CliError) -> vac_core::VacError {
    match e {
        CliError::Validation(m) => vac_core::VacError::Config(m),
        CliError::Numeric(m) => vac_core::VacError::numeric(m),
        CliError::Io(m) => vac_core::VacError::Io(std::io::Error::other(m)),
    }
}

/// Attacks the test split (reporting accuracy per ε) and the detector-fit
/// part of the training split, streaming every adversarial set to a shard.
pub fn cmd_attack(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<Vec<AttackSummary>> {
    let model = load_model(cfg, &checkpoint_path(cfg, checkpoint))?;
    create_dir(&cfg.out.join("adv"))?;
    let mut manifest = Vec::new();
    let test = attack_split(cfg, &model, &test_set(cfg)?, &mut manifest)?;
    attack_split(cfg, &model, &detector_fit_set(cfg)?, &mut manifest)?;
    write_csv(
        &cfg.out.join(MANIFEST_FILE),
        &["split", "epsilon", "shard", "count", "accuracy"],
        &manifest,
    )?;
    let rows: Vec<Vec<String>> = test.iter().map(|s| vec![fmt_f64(s.epsilon), fmt_f64(s.accuracy)]).collect();
    write_csv(&cfg.out.join(ACCURACY_FILE), &["epsilon", "accuracy"], &rows)?;
    for s in &test {
        println!("epsilon {:<6} accuracy {:.4}", s.epsilon, s.accuracy);
    }
    Ok(test)
}

fn shard_errors(cfg: &ExperimentConfig, model: &VacModel, clean: &Dataset) -> CliResult<ErrorSet> {
    let head = cfg.head();
    let mut adversarial = Vec::new();
    for eps in cfg.epsilons() {
        let path = cfg.out.join(shard_path(clean.split, eps));
        if !path.is_file() {
            return Err(CliError::Io(format!(
                "missing {} shard for epsilon {eps} ({}); run `attack` first",
                split_name(clean.split),
                path.display()
            )));
        }
        let shard = read_shard(&path)?;
        check_shard_matches(&shard, clean, &path)?;
        adversarial.push((eps, reconstruction_errors(&shard.images, model, head, 32)?));
    }
    Ok(ErrorSet {
        split: clean.split,
        clean: reconstruction_errors(&clean.images, model, head, 32)?,
        adversarial,
    })
}

/// Fits detectors on training-split shards and evaluates them on the test
/// shards.
pub fn cmd_detect(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<DetectionReport> {
    let model = load_model(cfg, &checkpoint_path(cfg, checkpoint))?;
    let fit = shard_errors(cfg, &model, &detector_fit_set(cfg)?)?;
    let eval = shard_errors(cfg, &model, &test_set(cfg)?)?;
    let report = detection_report(&fit, &eval, &cfg.epsilons(), cfg.detector_mode())?;
    let path = cfg.out.join(DETECTION_FILE);
    fs::write(&path, report.to_csv()).map_err(|e| CliError::io(path.display(), e))?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| vec![fmt_f64(r.epsilon), fmt_f64(r.mean_clean_error), fmt_f64(r.mean_adv_error)])
        .collect();
    write_csv(
        &cfg.out.join(RECON_ERROR_FILE),
        &["epsilon", "mean_clean_error", "mean_adv_error"],
        &rows,
    )?;
    for r in &report.rows {
        println!(
            "epsilon {:<6} detection rate {:.4} (reconstruction error clean {:.5}, adversarial {:.5})",
            r.epsilon, r.rate, r.mean_clean_error, r.mean_adv_error
        );
    }
    Ok(report)
}

pub const RECONSTRUCT_HEADER: [&str; 8] = [
    "row",
    "test_index",
    "true_label",
    "predicted_label",
    "reconstruction_predicted_label",
    "clean",
    "adversarial",
    "reconstruction",
];

pub fn reconstruct_dir(cfg: &ExperimentConfig, eps: f64) -> PathBuf {
    cfg.out.join("reconstruct").join(format!("eps_{eps}"))
}

/// Dumps (clean, adversarial, reconstruction-of-adversarial) triplets for
/// misclassified adversarial test inputs. Returns the number of rows.
pub fn cmd_reconstruct(cfg: &ExperimentConfig, checkpoint: Option<&Path>, epsilon: Option<f64>) -> CliResult<usize> {
    let eps = epsilon.unwrap_or(cfg.reconstruct.epsilon);
    if !(0.0..=1.0).contains(&eps) {
        return Err(CliError::Validation(format!("epsilon {eps} outside [0, 1]")));
    }
    let model = load_model(cfg, &checkpoint_path(cfg, checkpoint))?;
    let test = test_set(cfg)?;
    let dir = reconstruct_dir(cfg, eps);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(dir.display(), e))?;
    }
    create_dir(&dir)?;
    let attack = cfg.attack_config().with_epsilon(eps);
    let [_, h, w] = test.image_shape();
    let head = cfg.head();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut grid: Vec<[Vec<f64>; 3]> = Vec::new();
    for idx in test.chunks(cfg.attack.wave) {
        if rows.len() >= cfg.reconstruct.max_rows {
            break;
        }
        let batch = test.batch(&idx);
        let adv = pgd_parallel(&batch.images, &batch.labels, &model, &attack, 8)?;
        let pred = predict_classes(&adv, &model, 32)?;
        let recon = reconstruct(&adv, &model, head, ReconstructMode::MeanPath, None)?;
        let recon_pred = predict_classes(&recon, &model, 32)?;
        for (k, &i) in idx.iter().enumerate() {
            if rows.len() >= cfg.reconstruct.max_rows || pred[k] == batch.labels[k] {
                continue;
            }
            let r = rows.len();
            let names = ["clean", "adv", "recon"].map(|s| format!("row_{r:03}_{s}.pgm"));
            let images = [batch.images.item(k).to_vec(), adv.item(k).to_vec(), recon.item(k).to_vec()];
            for (name, img) in names.iter().zip(&images) {
                write_pgm(&dir.join(name), w, h, img)?;
            }
            rows.push(vec![
                r.to_string(),
                i.to_string(),
                batch.labels[k].to_string(),
                pred[k].to_string(),
                recon_pred[k].to_string(),
                names[0].clone(),
                names[1].clone(),
                names[2].clone(),
            ]);
            grid.push(images);
        }
    }
    write_csv(&dir.join("rows.csv"), &RECONSTRUCT_HEADER, &rows)?;
    if rows.is_empty() {
        println!("no misclassified adversarial test samples at epsilon {eps}; nothing written");
        return Ok(0);
    }
    // one grid row per triplet, one pixel of padding between images
    let gw = 3 * w + 2;
    let mut pixels = vec![1.0; gw * h * grid.len()];
    for (r, triplet) in grid.iter().enumerate() {
        for (c, img) in triplet.iter().enumerate() {
            for y in 0..h {
                let dst = (r * h + y) * gw + c * (w + 1);
                pixels[dst..dst + w].copy_from_slice(&img[y * w..(y + 1) * w]);
            }
        }
    }
    write_pgm(&dir.join("grid.pgm"), gw, h * grid.len(), &pixels)?;
    println!("wrote {} misclassified triplets to {}", rows.len(), dir.display());
    Ok(rows.len())
}

/// Which hyperparameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Capacity,
    L1,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Capacity => "capacity",
            SweepKind::L1 => "l1_strength",
        }
    }
}

/// Train, attack and detect for one sweep value inside its own directory.
fn sweep_cell(cfg: &ExperimentConfig) -> CliResult<(Vec<AttackSummary>, DetectionReport)> {
    cmd_train(cfg)?;
    let acc = cmd_attack(cfg, None)?;
    let det = cmd_detect(cfg, None)?;
    Ok((acc, det))
}

pub fn sweep_table_path(cfg: &ExperimentConfig, kind: SweepKind, metric: &str) -> PathBuf {
    cfg.out.join(format!("sweep_{}_{metric}.csv", kind.name()))
}

/// Runs the capacity and ℓ1 sweeps and writes table-shaped CSVs (rows =
/// sweep value, columns = ε). A failed cell becomes a row of NaN and an
/// `error.txt` next to its outputs.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> CliResult<()> {
    if cfg.sweep.capacities.is_empty() && cfg.sweep.l1_strengths.is_empty() {
        return Err(CliError::Validation("sweep.capacities and sweep.l1_strengths are both empty".into()));
    }
    write_config(cfg)?;
    let eps = cfg.epsilons();
    for (kind, values) in [
        (SweepKind::Capacity, &cfg.sweep.capacities),
        (SweepKind::L1, &cfg.sweep.l1_strengths),
    ] {
        let mut values = values.clone();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let mut tables: [Vec<Vec<String>>; 3] = Default::default();
        for v in values {
            let mut cell = cfg.clone();
            cell.out = cfg.out.join("sweep").join(format!("{}_{v}", kind.name()));
            match kind {
                SweepKind::Capacity => cell.train.capacity = v,
                SweepKind::L1 => cell.train.l1_strength = v,
            }
            let mut rows = [vec![fmt_f64(v)], vec![fmt_f64(v)], vec![fmt_f64(v)]];
            match sweep_cell(&cell) {
                Ok((acc, det)) => {
                    for e in &eps {
                        let a = acc.iter().find(|s| s.epsilon == *e).map_or(f64::NAN, |s| s.accuracy);
                        let d = det.rows.iter().find(|r| r.epsilon == *e);
                        rows[0].push(fmt_f64(a));
                        rows[1].push(fmt_f64(d.map_or(f64::NAN, |r| r.rate)));
                        rows[2].push(fmt_f64(d.map_or(f64::NAN, |r| r.mean_adv_error)));
                    }
                }
                Err(e) => {
                    log::error!("sweep {} = {v} failed: {e}", kind.name());
                    create_dir(&cell.out)?;
                    fs::write(cell.out.join("error.txt"), format!("{e}\n"))?;
                    for row in &mut rows {
                        row.extend(eps.iter().map(|_| fmt_f64(f64::NAN)));
                    }
                }
            }
            for (t, r) in tables.iter_mut().zip(rows) {
                t.push(r);
            }
        }
        let header: Vec<String> = std::iter::once(kind.name().to_string()).chain(eps.iter().map(|e| fmt_f64(*e))).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        for (metric, table) in ["accuracy", "detection", "recon_error"].iter().zip(&tables) {
            write_csv(&sweep_table_path(cfg, kind, metric), &header, table)?;
        }
    }
    Ok(())
}

/// Reads a two-column `epsilon,value` CSV written by this harness.
pub fn read_eps_column(path: &Path, column: &str) -> CliResult<Vec<(f64, f64)>> {
    let (header, rows) = read_csv(path)?;
    let col = header
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| CliError::Io(format!("{}: no column `{column}`", path.display())))?;
    rows.iter()
        .map(|r| {
            let parse = |s: &str| s.parse::<f64>().map_err(|e| CliError::io(path.display(), e));
            Ok((parse(&r[0])?, parse(&r[col])?))
        })
        .collect()
}

/// Gradient checks of every op and of the full objective, `cases` random
/// cases each. Returns the worst relative error per check.
pub fn cmd_gradcheck(seed: u64, cases: usize) -> CliResult<Vec<(&'static str, f64)>> {
    let mut worst: Vec<(&'static str, f64)> = verify::CHECK_NAMES.iter().map(|&n| (n, 0.0)).collect();
    for case in 0..cases as u64 {
        for ((_, w), (_, rep)) in worst.iter_mut().zip(verify::all_checks(seed.wrapping_add(case))?) {
            *w = w.max(rep.max_rel_error);
        }
    }
    let mut failed = 0;
    for (name, e) in &worst {
        let ok = *e <= verify::TOLERANCE;
        failed += usize::from(!ok);
        println!("{} {name:<32} max relative error {e:.3e}", if ok { "ok  " } else { "FAIL" });
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} gradient checks above {}", verify::TOLERANCE)));
    }
    Ok(worst)
}
