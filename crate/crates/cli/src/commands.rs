use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fpd_core::datasets::{
    corrupt_labels, crop_records, load_annotations, split_validation, synth_dataset_with, Sample,
    SynthConfig,
};
use fpd_core::network::model_spec;
use fpd_core::training::{
    distill_student_logged, evaluate_samples, load_checkpoint, save_checkpoint, train_teacher_logged,
    Checkpoint, LogRecord, TrainData,
};
use fpd_core::{HourglassConfig, ModelSpec};
use log::info;
use serde::Serialize;

use crate::config::{DataConfig, RunConfig};
use crate::plot::{plot_file, CurveFile, Series};

/// The architecture pairs of the cost table, largest first.
pub const DEFAULT_ARCH_GRID: [(usize, usize); 7] =
    [(8, 256), (4, 256), (2, 256), (1, 256), (4, 128), (4, 64), (4, 32)];

/// Offset separating the corruption stream from the sample stream.
const CORRUPTION_SEED_OFFSET: u64 = 0x5eed_c0de;

/// Builds train and validation crops at the network's input size.
pub fn build_data(run: &RunConfig) -> Result<TrainData> {
    let net = &run.network;
    match &run.data {
        DataConfig::Synthetic {
            train_samples,
            val_samples,
            corrupt_fraction,
        } => {
            let cfg = SynthConfig::for_size(net.input_size);
            let all = synth_dataset_with(&cfg, train_samples + val_samples, net.num_joints, run.seed)?;
            let mut train: Vec<Sample> = all.into_iter().map(|(s, _)| s).collect();
            let val = train.split_off(*train_samples);
            if *corrupt_fraction > 0.0 {
                let moved = corrupt_labels(&mut train, *corrupt_fraction, run.seed ^ CORRUPTION_SEED_OFFSET)?;
                info!("corrupted {moved} training joints");
            }
            Ok(TrainData { train, val })
        }
        DataConfig::Annotations { train, val, val_split } => {
            run.check_data_paths()?;
            let records = load_annotations(&train.annotations, train.format)?;
            if let Some(r) = records.iter().find(|r| r.joints.len() != net.num_joints) {
                bail!(
                    "{} has {} joints but the network predicts {} (set network.num_joints)",
                    r.image_path,
                    r.joints.len(),
                    net.num_joints
                );
            }
            let (train_samples, val_samples) = match val {
                Some(v) => {
                    let val_records = load_annotations(&v.annotations, v.format)?;
                    (
                        crop_records(&records, &train.image_root, net.input_size)?,
                        crop_records(&val_records, &v.image_root, net.input_size)?,
                    )
                }
                None => {
                    let (tr, va) = split_validation(&records, *val_split, run.seed);
                    (
                        crop_records(&tr, &train.image_root, net.input_size)?,
                        crop_records(&va, &train.image_root, net.input_size)?,
                    )
                }
            };
            Ok(TrainData {
                train: train_samples,
                val: val_samples,
            })
        }
    }
}

/// Streams log records to a JSONL file and keeps them for curve export.
struct LogSink {
    out: BufWriter<File>,
    records: Vec<LogRecord>,
    error: Option<std::io::Error>,
}

impl LogSink {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).with_context(|| format!("creating log {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(f),
            records: Vec::new(),
            error: None,
        })
    }

    fn push(&mut self, r: &LogRecord) {
        if let LogRecord::Validation {
            epoch, mean_pck, auc, ..
        } = r
        {
            info!("epoch {epoch}: mean PCK {mean_pck:.4}, AUC {auc:.4}");
        }
        if self.error.is_none() {
            let line = serde_json::to_string(r).expect("log records serialize");
            if let Err(e) = writeln!(self.out, "{line}") {
                self.error = Some(e);
            }
        }
        self.records.push(r.clone());
    }

    fn finish(mut self) -> Result<Vec<LogRecord>> {
        if let Some(e) = self.error {
            return Err(e).context("writing training log");
        }
        self.out.flush().context("flushing training log")?;
        Ok(self.records)
    }
}

pub fn train_teacher(run: &RunConfig) -> Result<()> {
    run.persist()?;
    let data = build_data(run)?;
    info!(
        "training teacher {}x{} on {} samples",
        run.network.num_stages,
        run.network.channels,
        data.train.len()
    );
    let dir = &run.out_dir;
    let mut sink = LogSink::create(&dir.join("teacher_log.jsonl"))?;
    let ck = train_teacher_logged(&data, run.network, &run.train, &mut |r| sink.push(r))?;
    let records = sink.finish()?;
    let ckpt_path = dir.join("teacher.ckpt");
    save_checkpoint(&ck, &ckpt_path)?;
    CurveFile::from_log("teacher", &records).save(&dir.join("teacher_loss.json"))?;
    println!(
        "teacher checkpoint {} (step {}, best {})",
        ckpt_path.display(),
        ck.step,
        fmt_metric(ck.best_metric)
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepEntry {
    alpha: f64,
    best_mean_pck: Option<f64>,
    step: usize,
    checkpoint: PathBuf,
    log: PathBuf,
}

pub fn distill(run: &RunConfig, teacher: &Checkpoint) -> Result<()> {
    run.persist()?;
    let data = build_data(run)?;
    let alphas = if run.alpha_sweep.is_empty() {
        vec![run.train.loss.alpha]
    } else {
        run.alpha_sweep.clone()
    };
    let dir = &run.out_dir;
    let mut summary = Vec::new();
    for &alpha in &alphas {
        let mut tc = run.train.clone();
        tc.loss.alpha = alpha;
        let tag = format!("alpha{alpha}");
        info!("distilling student {}x{} with alpha {alpha}", run.network.num_stages, run.network.channels);
        let log = dir.join(format!("distill_{tag}.jsonl"));
        let mut sink = LogSink::create(&log)?;
        let ck = distill_student_logged(&data, teacher, run.network, &tc, &mut |r| sink.push(r))?;
        let records = sink.finish()?;
        let checkpoint = dir.join(format!("student_{tag}.ckpt"));
        save_checkpoint(&ck, &checkpoint)?;
        CurveFile::from_log(&tag, &records).save(&dir.join(format!("distill_{tag}_loss.json")))?;
        println!(
            "alpha {alpha}: checkpoint {} (step {}, best {})",
            checkpoint.display(),
            ck.step,
            fmt_metric(ck.best_metric)
        );
        summary.push(SweepEntry {
            alpha,
            best_mean_pck: ck.best_metric,
            step: ck.step,
            checkpoint,
            log,
        });
    }
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(dir.join("sweep_summary.json"), text).context("writing sweep summary")?;
    let scored: Vec<&SweepEntry> = summary.iter().filter(|e| e.best_mean_pck.is_some()).collect();
    if scored.len() > 1 {
        CurveFile {
            title: "alpha sweep".into(),
            x_label: "alpha".into(),
            y_label: format!("best {}", run.protocol.name()),
            series: vec![Series {
                name: "student".into(),
                x: scored.iter().map(|e| e.alpha).collect(),
                y: scored.iter().filter_map(|e| e.best_mean_pck).collect(),
            }],
        }
        .save(&dir.join("alpha_sweep.json"))?;
    }
    Ok(())
}

pub fn eval(run: &RunConfig, ck: &Checkpoint) -> Result<()> {
    run.persist()?;
    let data = build_data(run)?;
    if data.val.is_empty() {
        bail!("the evaluation split is empty");
    }
    let net = ck.to_network()?;
    let result = evaluate_samples(&net, &data.val, run.protocol)?.with_cost(model_spec(&ck.network)?);
    let report = result.report();
    println!("{report}");
    let dir = &run.out_dir;
    std::fs::write(dir.join("eval_report.txt"), &report).context("writing eval report")?;
    std::fs::write(dir.join("eval_result.json"), serde_json::to_string_pretty(&result)?)
        .context("writing eval result")?;
    CurveFile::from_pck(run.protocol.name(), &result.curve).save(&dir.join("pck_curve.json"))?;
    Ok(())
}

/// One row per architecture at the run's input size and joint count.
pub fn arch_rows(base: &HourglassConfig, grid: &[(usize, usize)]) -> Result<Vec<ModelSpec>> {
    grid.iter()
        .map(|&(s, c)| Ok(model_spec(&base.with_stages(s).with_channels(c))?))
        .collect()
}

pub fn format_arch_table(rows: &[ModelSpec]) -> String {
    let mut out = format!("{:>6} {:>8} {:>12} {:>10}\n", "stages", "channels", "params (M)", "GFLOPs");
    for r in rows {
        out.push_str(&format!(
            "{:>6} {:>8} {:>12.3} {:>10.2}\n",
            r.config.num_stages,
            r.config.channels,
            r.params_millions(),
            r.gflops()
        ));
    }
    out
}

pub fn arch_report(run: &RunConfig) -> Result<()> {
    run.persist()?;
    let grid = run.arch_grid.clone().unwrap_or_else(|| DEFAULT_ARCH_GRID.to_vec());
    let rows = arch_rows(&run.network, &grid)?;
    print!("{}", format_arch_table(&rows));
    std::fs::write(run.out_dir.join("arch_report.json"), serde_json::to_string_pretty(&rows)?)
        .context("writing arch report")?;
    Ok(())
}

pub fn plot_curves(run: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    if inputs.is_empty() {
        bail!("plot-curves needs at least one curve file or training log");
    }
    run.persist()?;
    for input in inputs {
        let out = plot_file(input, &run.out_dir)?;
        println!("{}", out.display());
    }
    Ok(())
}

pub fn load_teacher(path: Option<&Path>) -> Result<Checkpoint> {
    let path = path.context("distillation needs a teacher checkpoint (--teacher-ckpt or teacher_ckpt)")?;
    load_checkpoint(path).with_context(|| format!("loading teacher checkpoint {}", path.display()))
}

pub fn load_student(path: Option<&Path>) -> Result<Checkpoint> {
    let path = path.context("eval needs a checkpoint (--checkpoint or checkpoint)")?;
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn fmt_metric(m: Option<f64>) -> String {
    m.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_table() {
        let rows = arch_rows(&HourglassConfig::teacher(), &DEFAULT_ARCH_GRID).unwrap();
        let t = format_arch_table(&rows);
        assert_eq!(t.lines().count(), 8);
        assert!(rows[0].param_count > rows[4].param_count);
    }

    #[test]
    fn empty_grid_is_header_only() {
        let t = format_arch_table(&arch_rows(&HourglassConfig::teacher(), &[]).unwrap());
        assert_eq!(t.lines().count(), 1);
    }
}
