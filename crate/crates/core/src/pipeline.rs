//! End-to-end orchestration shared by the command-line tool and tests:
//! dataset preprocessing, both training stages and dataset evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use log::info;
use ndarray::s;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, evaluate_case, table_csv, write_difference_maps, EvalReport};
use crate::inference::{MmgSynthesizer, Synthesizer};
use crate::io::{list_cases, read_case, write_case, write_json, write_volume, PreprocessRecord, Split};
use crate::losses::{scalar, ssim};
use crate::networks::{CenModel, MmgModel};
use crate::diffusion::NoiseSchedule;
use crate::preprocessing::preprocess_case;
use crate::training::{
    derive_seed, load_cen_model, load_mmg_model, CenTrainer, LossLog, MmgTrainer, CEN_LOG_HEADER, MMG_LOG_HEADER,
};
use crate::types::{validate_case, Modality, MultiModalVolume, Volume};
use crate::volumetric::SubvolumeRefiner;

/// Preprocesses every case under `input` into `output`, keeping splits.
/// Cases are spread over `workers` threads.
pub fn preprocess_dataset(cfg: &RunConfig, input: &Path, output: &Path, workers: usize) -> Result<Vec<String>> {
    let dirs = list_cases(input, None)?;
    if dirs.is_empty() {
        return Err(Error::InvalidData(format!("no cases under {}", input.display())));
    }
    let chunk = dirs.len().div_ceil(workers.max(1));
    let results: Vec<Result<Vec<String>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = dirs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|dir| {
                            let (case, manifest) = read_case(dir)?;
                            let bad = validate_case(&case);
                            if !bad.is_empty() {
                                let list: Vec<String> = bad.iter().map(|v| v.to_string()).collect();
                                return Err(Error::InvalidData(format!("{}: {}", case.case_id, list.join("; "))));
                            }
                            let out = preprocess_case(&case, &cfg.preprocess)?;
                            let record = PreprocessRecord {
                                config: cfg.preprocess.clone(),
                                intensity_range: "[0,1]".into(),
                            };
                            write_case(&output.join(&case.case_id), &out, manifest.split, Some(record))?;
                            Ok(case.case_id)
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut ids = Vec::new();
    for r in results {
        ids.extend(r?);
    }
    Ok(ids)
}

/// Loads all cases of one split (all cases when `split` is `None`).
pub fn load_cases(data: &Path, split: Option<Split>) -> Result<Vec<MultiModalVolume>> {
    list_cases(data, split)?
        .iter()
        .map(|d| read_case(d).map(|(c, _)| c))
        .collect()
}

/// Mean 2D SSIM of the synthesized middle slice, over cases and all four
/// missing modalities.
pub fn validation_ssim(
    model: &MmgModel,
    sched: &NoiseSchedule,
    cfg: &RunConfig,
    cases: &[MultiModalVolume],
    seed: u64,
) -> Result<f64> {
    let synth = MmgSynthesizer {
        model,
        sched,
        cfg: cfg.inference,
    };
    let mut scores = Vec::new();
    for case in cases {
        let d = case.shape().map(|s| s[2]).unwrap_or(0);
        let mid = d / 2;
        let mut one = case.clone();
        for v in one.volumes.values_mut() {
            *v = v.with_data(v.data.slice(s![.., .., mid..mid + 1]).to_owned());
        }
        one.seg_mask = None;
        for m in Modality::ALL {
            let out = synth.synthesize(&one.with_zeroed(m), m, derive_seed(seed, &format!("val/{}/{m}", case.case_id)))?;
            let truth = one.volume(m)?;
            let (h, w, _) = truth.data.dim();
            let a = Tensor::from_vec(out.data.iter().map(|&x| x as f64).collect::<Vec<_>>(), (1, h, w), &Device::Cpu)?;
            let b = Tensor::from_vec(truth.data.iter().map(|&x| x as f64).collect::<Vec<_>>(), (1, h, w), &Device::Cpu)?;
            scores.push(scalar(&ssim(&a, &b)?.squeeze(0)?)?);
        }
    }
    if scores.is_empty() {
        return Err(Error::InvalidData("no validation cases".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone)]
pub struct MmgRunSummary {
    pub last: PathBuf,
    pub best: Option<PathBuf>,
    pub best_val_ssim: Option<f64>,
    pub log: PathBuf,
    pub steps: u64,
}

/// Trains the slice model on the train split of `data`, writing checkpoints
/// and the loss log under `out`. Validation cases are only scored.
pub fn train_mmg(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    device: &Device,
    resume: Option<&Path>,
) -> Result<MmgRunSummary> {
    let train = load_cases(data, Some(Split::Train))?;
    if train.is_empty() {
        return Err(Error::InvalidData(format!("no training cases under {}", data.display())));
    }
    let val = load_cases(data, Some(Split::Validation))?;
    let mut trainer = match resume {
        Some(p) => MmgTrainer::load(p, cfg.train.mmg.clone(), device)?,
        None => MmgTrainer::new(
            cfg.mmg_arch.clone(),
            cfg.schedule,
            cfg.loss,
            cfg.train.mmg.clone(),
            cfg.train.seed,
            device,
        )?,
    };
    let log_path = out.join("train_mmg_log.csv");
    let mut log = LossLog::create(&log_path, MMG_LOG_HEADER)?;
    let ckpt_dir = out.join("checkpoints");
    let last = ckpt_dir.join("mmg_last.ckpt");
    let best_path = ckpt_dir.join("mmg_best.ckpt");
    let mut best: Option<f64> = None;
    let val_seed = derive_seed(cfg.train.seed, "mmg-val");
    while trainer.epoch < cfg.train.mmg.epochs {
        let records = trainer.train_epoch(&train, Some(&mut log))?;
        let mean = records.iter().map(|r| r.total).sum::<f64>() / records.len().max(1) as f64;
        info!("mmg epoch {} step {} mean loss {mean:.4e}", trainer.epoch, trainer.step);
        let due = trainer.epoch % cfg.train.checkpoint_every == 0 || trainer.epoch == cfg.train.mmg.epochs;
        if due {
            trainer.save(&ckpt_dir.join(format!("mmg_epoch{:04}.ckpt", trainer.epoch)))?;
            trainer.save(&last)?;
            if !val.is_empty() {
                let score = validation_ssim(&trainer.model, &trainer.sched, cfg, &val, val_seed)?;
                info!("mmg epoch {} validation ssim {score:.4}", trainer.epoch);
                if best.is_none_or(|b| score > b) {
                    best = Some(score);
                    trainer.save(&best_path)?;
                }
            }
        }
    }
    if !last.exists() {
        trainer.save(&last)?;
    }
    Ok(MmgRunSummary {
        last,
        best: best.map(|_| best_path),
        best_val_ssim: best,
        log: log_path,
        steps: trainer.step,
    })
}

/// Synthesizes on demand and memoizes one volume per (case, modality).
struct SynthCache<'a> {
    synth: MmgSynthesizer<'a>,
    seed: u64,
    done: BTreeMap<(usize, Modality), Volume>,
}

impl SynthCache<'_> {
    fn get(&mut self, cases: &[MultiModalVolume], i: usize, m: Modality) -> Result<Volume> {
        if let Some(v) = self.done.get(&(i, m)) {
            return Ok(v.clone());
        }
        let case = &cases[i];
        let seed = derive_seed(self.seed, &format!("cen-input/{}/{m}", case.case_id));
        let v = self.synth.synthesize(&case.with_zeroed(m), m, seed)?;
        self.done.insert((i, m), v.clone());
        Ok(v)
    }
}

#[derive(Debug, Clone)]
pub struct CenRunSummary {
    pub last: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
}

/// Trains the refiner on frozen slice-model outputs of the train split.
/// Each epoch draws a masked modality per training case; that case's
/// synthesized volume is paired with its ground truth.
pub fn train_cen(cfg: &RunConfig, data: &Path, mmg_ckpt: &Path, out: &Path, device: &Device) -> Result<CenRunSummary> {
    let train = load_cases(data, Some(Split::Train))?;
    if train.is_empty() {
        return Err(Error::InvalidData(format!("no training cases under {}", data.display())));
    }
    let (model, sched, _) = load_mmg_model(mmg_ckpt, device)?;
    let depth = train[0].shape().map(|s| s[2]).unwrap_or(0);
    let plan = cfg.windows.plan(depth)?;
    let [h, w, _] = train[0].shape().unwrap_or([0; 3]);
    let expected = [plan.window_depth, h, w];
    if cfg.cen_arch.volume_shape != expected {
        return Err(Error::Shape(format!(
            "cen_arch.volume_shape {:?} does not match windows of {:?}",
            cfg.cen_arch.volume_shape, expected
        )));
    }
    let mut trainer = CenTrainer::new(cfg.cen_arch.clone(), cfg.loss, cfg.train.cen.clone(), cfg.train.seed, device)?;
    let mut cache = SynthCache {
        synth: MmgSynthesizer {
            model: &model,
            sched: &sched,
            cfg: cfg.inference,
        },
        seed: derive_seed(cfg.train.seed, "cen-synth"),
        done: BTreeMap::new(),
    };
    let log_path = out.join("train_cen_log.csv");
    let mut log = LossLog::create(&log_path, CEN_LOG_HEADER)?;
    let ckpt_dir = out.join("checkpoints");
    let last = ckpt_dir.join("cen_last.ckpt");
    while trainer.epoch < cfg.train.cen.epochs {
        let mut pool = Vec::with_capacity(train.len());
        for (i, case) in train.iter().enumerate() {
            let m = crate::preprocessing::draw_missing(trainer.rng_mut());
            pool.push((cache.get(&train, i, m)?, case.volume(m)?.clone()));
        }
        let records = trainer.train_epoch(&pool, &plan, Some(&mut log))?;
        let mean = records.iter().map(|r| r.total).sum::<f64>() / records.len().max(1) as f64;
        info!("cen epoch {} step {} mean loss {mean:.4e}", trainer.epoch, trainer.step);
        if trainer.epoch % cfg.train.checkpoint_every == 0 || trainer.epoch == cfg.train.cen.epochs {
            trainer.save(&ckpt_dir.join(format!("cen_epoch{:04}.ckpt", trainer.epoch)))?;
            trainer.save(&last)?;
        }
    }
    Ok(CenRunSummary {
        last,
        log: log_path,
        steps: trainer.step,
    })
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub reports: Vec<EvalReport>,
    pub table: PathBuf,
}

/// Evaluates every case of `split` for each modality in `missing`, writing
/// per-case JSON reports, synthesized volumes, difference maps and the
/// aggregate table under `out`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_dataset(
    cfg: &RunConfig,
    data: &Path,
    split: Option<Split>,
    mmg_ckpt: &Path,
    cen_ckpt: Option<&Path>,
    missing: &[Modality],
    out: &Path,
    device: &Device,
) -> Result<EvalSummary> {
    let cases = load_cases(data, split)?;
    if cases.is_empty() {
        return Err(Error::InvalidData(format!("no cases to evaluate under {}", data.display())));
    }
    let (model, sched, _) = load_mmg_model(mmg_ckpt, device)?;
    let cen: Option<CenModel> = cen_ckpt.map(|p| load_cen_model(p, device).map(|(m, _)| m)).transpose()?;
    let synth = MmgSynthesizer {
        model: &model,
        sched: &sched,
        cfg: cfg.inference,
    };
    let hash = cfg.hash();
    let mut reports = Vec::new();
    for case in &cases {
        let plan = match &cen {
            Some(_) => Some(cfg.windows.plan(case.shape().map(|s| s[2]).unwrap_or(0))?),
            None => None,
        };
        for &m in missing {
            let refiner = cen
                .as_ref()
                .zip(plan.as_ref())
                .map(|(c, p)| (c as &dyn SubvolumeRefiner, p));
            let outcome = evaluate_case(case, m, &synth, refiner, cfg.train.seed, &hash)?;
            let stem = format!("{}_{m}", case.case_id);
            write_json(&out.join("reports").join(format!("{stem}.json")), &outcome.report)?;
            write_volume(&out.join("volumes").join(format!("{stem}_mmg.nii.gz")), &outcome.mmg)?;
            if let Some(c) = &outcome.cen {
                write_volume(&out.join("volumes").join(format!("{stem}_cen.nii.gz")), c)?;
            }
            write_difference_maps(out, &case.case_id, case.volume(m)?, &outcome.mmg, outcome.cen.as_ref(), None)?;
            info!(
                "{} missing {m}: ssim mmg {:.4} cen {:?}",
                case.case_id, outcome.report.ssim_mmg, outcome.report.ssim_cen
            );
            reports.push(outcome.report);
        }
    }
    let table = out.join("eval_table.csv");
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(&table, table_csv(&aggregate(&reports))).map_err(|e| Error::io(&table, e))?;
    write_json(&out.join("eval_reports.json"), &reports)?;
    Ok(EvalSummary { reports, table })
}
