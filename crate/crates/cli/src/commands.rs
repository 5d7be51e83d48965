//! Subcommand implementations. Each returns the key metrics for the
//! summary line.

use std::fs;
use std::path::{Path, PathBuf};

use ramil_core::abmil::{ensemble_predict, explain, render_overlay, AttentionReport};
use ramil_core::classifier::PatchClassifier;
use ramil_core::data::{assign_splits, Radiograph, Split};
use ramil_core::error::{Error, Result};
use ramil_core::evaluation::{dice, RegressionReport};
use ramil_core::foreground::{generate_mask, ForegroundMask};
use ramil_core::image::{save_rgb, GrayImage};
use ramil_core::joints::model::{evaluate_landmarks, train_landmark_model, LandmarkModel, LandmarkSample};
use ramil_core::joints::{image_pixel_spacing, landmarkwise_mre, symmetry_confusion, LocalisationMetrics};
use ramil_core::synthetic::{generate, write_dataset};
use ramil_core::training::{
    develop_classifier, init_run_dir, load_json, save_json, select_and_ensemble, train_run, write_noise_sds, write_scores,
    Dataset, LandmarkSource, RunSummary, ScoringPipeline, CHECKPOINTS, LANDMARK_MODEL, PC_BEST, REPORTS, RUN_SUMMARY,
};

use crate::config::RunConfig;
use crate::{Command, Common};

pub type Metrics = Vec<(String, String)>;

fn m(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn prepare(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(&common.config)?;
    mkdir(&common.out)?;
    let copy = common.out.join("config-source.toml");
    fs::copy(&common.config, &copy).map_err(|e| Error::Io { path: copy, source: e })?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig, flag: Option<&Path>) -> Result<Dataset> {
    Dataset::load(&cfg.manifest(flag)?)
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    if s == "all" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|e: String| Error::Config { key: "split".into(), message: e })
}

fn split_items<'a>(data: &'a Dataset, split: Option<Split>) -> Vec<&'a Radiograph> {
    match split {
        None => data.items.iter().collect(),
        Some(s) => data.indices(s).into_iter().map(|i| &data.items[i]).collect(),
    }
}

fn landmark_samples<'a>(items: &[&'a Radiograph]) -> Result<Vec<LandmarkSample<'a>>> {
    items
        .iter()
        .map(|r| {
            let lms = r
                .landmarks
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("{} has no reference landmarks", r.id)))?;
            Ok(LandmarkSample {
                image: &r.image,
                landmarks: lms,
                spacing: image_pixel_spacing(lms)?,
            })
        })
        .collect()
}

fn metrics_of(l: &LocalisationMetrics) -> Metrics {
    vec![
        m("mre_mm", f4(l.mre_mm)),
        m("sdr2", f4(l.sdr[0])),
        m("sdr3", f4(l.sdr[1])),
        m("sdr4", f4(l.sdr[2])),
        m("sdr10", f4(l.sdr[3])),
    ]
}

fn regression_metrics(prefix: &str, r: &RegressionReport) -> Metrics {
    vec![
        m(&format!("{prefix}n"), r.n),
        m(&format!("{prefix}pcc"), f4(r.pcc)),
        m(&format!("{prefix}mae"), f4(r.mae)),
        m(&format!("{prefix}rmse"), f4(r.rmse)),
    ]
}

/// Landmark checkpoint for a joint run: the flag, else the copy inside the
/// run directory. `None` when reference landmarks are requested.
fn landmark_checkpoint(run: &Path, flag: Option<&Path>, reference: bool) -> Result<Option<PathBuf>> {
    if reference {
        return Ok(None);
    }
    let p = flag.map(Path::to_path_buf).unwrap_or_else(|| run.join(CHECKPOINTS).join(LANDMARK_MODEL));
    if !p.exists() {
        return Err(Error::MissingArtifact(p));
    }
    Ok(Some(p))
}

fn load_pipeline(run: &Path, scheme: Option<u8>, landmarks: Option<&Path>, reference: bool) -> Result<ScoringPipeline> {
    let snap = ramil_core::training::TrainConfig::load(&run.join(ramil_core::training::CONFIG_SNAPSHOT))?;
    if let Some(s) = scheme {
        if s != snap.scheme {
            return Err(Error::Config {
                key: "scheme".into(),
                message: format!("run {} was trained with scheme {}, not {s}", run.display(), snap.scheme),
            });
        }
    }
    let lm = if snap.scheme == 2 { landmark_checkpoint(run, landmarks, reference)? } else { None };
    ScoringPipeline::load(run, lm.as_deref())
}

fn write_report(out: &Path, name: &str, ids: &[String], pred: &[f64], truth: &[f64]) -> Result<RegressionReport> {
    let dir = out.join(REPORTS);
    mkdir(&dir)?;
    let mut rep = RegressionReport::new(ids, pred, truth)?;
    rep.write_scatter(&dir.join(format!("{name}_scatter.png")))?;
    rep.save_json(&dir.join(format!("{name}_report.json")))?;
    Ok(rep)
}

pub fn run(cmd: Command) -> Result<Metrics> {
    match cmd {
        Command::Synth { common } => {
            let cfg = prepare(&common)?;
            let s = &cfg.synth;
            let cases = generate(&s.spec, s.n)?;
            let splits = assign_splits(s.n, s.train_fraction, s.val_fraction, s.split_seed);
            let w = write_dataset(&cases, &splits, &common.out)?;
            let count = |sp| splits.iter().filter(|&&x| x == sp).count();
            Ok(vec![
                m("images", s.n),
                m("train", count(Split::Train)),
                m("val", count(Split::Val)),
                m("test", count(Split::Test)),
                m("manifest", w.manifest_path.display()),
            ])
        }
        Command::Masks { common, data } => {
            let cfg = prepare(&common)?;
            let ds = load_data(&cfg, data.manifest.as_deref())?;
            let dir = common.out.join("masks");
            mkdir(&dir)?;
            let truth_dir = ds.manifest.base_dir.join("truth");
            let mut dices = Vec::new();
            let mut degenerate = 0;
            for r in &ds.items {
                let mask = generate_mask(&r.id, &r.image, &cfg.train.mask)?;
                degenerate += mask.degenerate as usize;
                mask.save(&ForegroundMask::path_in(&dir, &r.id))?;
                let tp = ForegroundMask::path_in(&truth_dir, &r.id);
                if tp.exists() {
                    let t = ForegroundMask::load(&tp, r.id.clone())?;
                    dices.push(dice(&mask.pixels.view(), &t.pixels.view())?);
                }
            }
            let mut out = vec![m("masks", ds.items.len()), m("degenerate", degenerate)];
            if !dices.is_empty() {
                out.push(m("mean_dice", f4(dices.iter().sum::<f64>() / dices.len() as f64)));
                out.push(m("min_dice", f4(dices.iter().copied().fold(1.0, f64::min))));
            }
            Ok(out)
        }
        Command::TrainLandmarks { common, data } => {
            let cfg = prepare(&common)?;
            let ds = load_data(&cfg, data.manifest.as_deref())?;
            let train_items = split_items(&ds, Some(Split::Train));
            let val_items = split_items(&ds, Some(Split::Val));
            let train = landmark_samples(&train_items)?;
            let val = landmark_samples(&val_items)?;
            let ck = common.out.join(CHECKPOINTS);
            mkdir(&ck)?;
            let hist_path = common.out.join("landmark_history.csv");
            let mut rows = vec!["epoch,train_loss,val_mre_mm".to_string()];
            let (model, hist) = train_landmark_model(&train, &val, &cfg.landmarks, &mut |e| {
                rows.push(format!(
                    "{},{:.9},{}",
                    e.epoch,
                    e.train_loss,
                    e.val_mre_mm.map(|v| format!("{v:.6}")).unwrap_or_default()
                ));
            })?;
            fs::write(&hist_path, rows.join("\n") + "\n").map_err(|e| Error::Io { path: hist_path, source: e })?;
            model.save(&ck.join(LANDMARK_MODEL))?;
            let last = hist.last().expect("at least one epoch");
            let mut out = vec![m("epochs", hist.len()), m("train_loss", f4(last.train_loss))];
            if let Some(v) = last.val_mre_mm {
                out.push(m("val_mre_mm", f4(v)));
            }
            Ok(out)
        }
        Command::EvalLandmarks {
            common,
            data,
            checkpoint,
            split,
        } => {
            let cfg = prepare(&common)?;
            let ck = checkpoint.unwrap_or_else(|| common.out.join(CHECKPOINTS).join(LANDMARK_MODEL));
            let model = LandmarkModel::load(&ck)?;
            let ds = load_data(&cfg, data.manifest.as_deref())?;
            let items = split_items(&ds, parse_split(&split)?);
            let samples = landmark_samples(&items)?;
            if samples.is_empty() {
                return Err(Error::Empty("images in the evaluated split"));
            }
            let (metrics, preds) = evaluate_landmarks(&model, &samples)?;
            let pairs: Vec<_> = preds
                .iter()
                .zip(&samples)
                .map(|(p, s)| (p.clone(), s.landmarks.clone(), s.spacing))
                .collect();
            let per_landmark = landmarkwise_mre(&pairs)?;
            let confused = preds.iter().filter(|p| symmetry_confusion(p)).count();
            write_noise_sds(&common.out.join("landmark_sd_mm.txt"), &per_landmark)?;
            let dir = common.out.join(REPORTS);
            mkdir(&dir)?;
            save_json(
                &dir.join(format!("landmarks_{split}.json")),
                &serde_json::json!({
                    "metrics": metrics,
                    "landmarkwise_mre_mm": per_landmark,
                    "symmetry_confusions": confused,
                    "images": samples.len(),
                }),
            )?;
            let mut out = metrics_of(&metrics);
            out.push(m("images", samples.len()));
            out.push(m("symmetry_confusions", confused));
            Ok(out)
        }
        Command::TrainPc { common, data } => {
            let cfg = prepare(&common)?;
            let ds = load_data(&cfg, data.manifest.as_deref())?;
            init_run_dir(&common.out, &cfg.train)?;
            let (clf, hist) = develop_classifier(&ds, &cfg.train, None, Some(&common.out))?;
            clf.save(&common.out.join(CHECKPOINTS).join(PC_BEST))?;
            let best = hist
                .iter()
                .filter_map(|e| e.val_acc)
                .fold(f64::NAN, f64::max);
            let last = hist.last().expect("at least one epoch");
            Ok(vec![
                m("classes", clf.num_classes),
                m("epochs", hist.len()),
                m("train_acc", f4(last.train_acc)),
                m("best_val_acc", f4(best)),
            ])
        }
        Command::TrainAbmil {
            common,
            data,
            pc,
            landmarks,
        } => {
            let cfg = prepare(&common)?;
            let ds = load_data(&cfg, data.manifest.as_deref())?;
            let existing = common.out.join(CHECKPOINTS).join(PC_BEST);
            let classifier = match pc {
                Some(p) => Some(PatchClassifier::load(&p)?),
                None if existing.exists() => Some(PatchClassifier::load(&existing)?),
                None => None,
            };
            let lm_model = landmarks.as_deref().map(LandmarkModel::load).transpose()?;
            let source = match &lm_model {
                Some(m) => LandmarkSource::Model(m),
                None => LandmarkSource::Reference,
            };
            let summary = train_run(&ds, &cfg.train, &common.out, &source, classifier)?;
            if let Some(p) = &landmarks {
                let dst = common.out.join(CHECKPOINTS).join(LANDMARK_MODEL);
                if p.canonicalize().ok() != dst.canonicalize().ok() {
                    fs::copy(p, &dst).map_err(|e| Error::Io { path: dst, source: e })?;
                }
            }
            let mut out = vec![m("scheme", cfg.train.scheme), m("best_epoch", summary.best_epoch)];
            if let Some(v) = summary.val_rmse {
                out.push(m("val_rmse", f4(v)));
            }
            if let Some(t) = &summary.test {
                out.extend(regression_metrics("test_", t));
            }
            Ok(out)
        }
        Command::Score {
            common,
            data,
            scheme,
            checkpoint,
            landmarks,
            reference_landmarks,
            image,
            split,
        } => {
            let cfg = prepare(&common)?;
            let pipe = load_pipeline(&checkpoint, Some(scheme), landmarks.as_deref(), reference_landmarks)?;
            if let Some(path) = image {
                let img = GrayImage::load(&path)?;
                let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
                let r = Radiograph::new(id.clone(), img, None)?;
                let y = pipe.score(&r)?;
                write_scores(&common.out.join("scores.csv"), &[(id, y)])?;
                return Ok(vec![m("n", 1), m("score", f4(y))]);
            }
            let ds = load_data(&cfg, data.manifest.as_deref())?;
            let items = split_items(&ds, parse_split(&split)?);
            let mut rows = Vec::with_capacity(items.len());
            for r in &items {
                rows.push((r.id.clone(), pipe.score(r)?));
            }
            write_scores(&common.out.join("scores.csv"), &rows)?;
            let mut out = vec![m("n", rows.len())];
            let scored: Vec<(String, f64, f64)> = rows
                .iter()
                .zip(&items)
                .filter_map(|((id, p), r)| r.score.map(|t| (id.clone(), *p, t)))
                .collect();
            if scored.len() >= 2 {
                let ids: Vec<String> = scored.iter().map(|s| s.0.clone()).collect();
                let pred: Vec<f64> = scored.iter().map(|s| s.1).collect();
                let truth: Vec<f64> = scored.iter().map(|s| s.2).collect();
                let rep = write_report(&common.out, "score", &ids, &pred, &truth)?;
                out = regression_metrics("", &rep);
            }
            Ok(out)
        }
        Command::Ensemble {
            common,
            data,
            checkpoints,
            all,
            landmarks,
            reference_landmarks,
            split,
        } => {
            let cfg = prepare(&common)?;
            let runs: Vec<RunSummary> = checkpoints
                .iter()
                .map(|c| {
                    let mut s: RunSummary = load_json(&c.join(RUN_SUMMARY))?;
                    s.dir = c.clone();
                    Ok(s)
                })
                .collect::<Result<_>>()?;
            let members = if all { checkpoints.clone() } else { select_and_ensemble(&runs)?.members };
            let pipes: Vec<ScoringPipeline> = members
                .iter()
                .map(|d| load_pipeline(d, None, landmarks.as_deref(), reference_landmarks))
                .collect::<Result<_>>()?;
            let ds = load_data(&cfg, data.manifest.as_deref())?;
            let items = split_items(&ds, parse_split(&split)?);
            let mut per_member: Vec<Vec<f64>> = vec![Vec::with_capacity(items.len()); pipes.len()];
            let mut rows = Vec::with_capacity(items.len());
            for r in &items {
                let preds: Vec<f64> = pipes.iter().map(|p| p.score(r)).collect::<Result<_>>()?;
                for (v, p) in per_member.iter_mut().zip(&preds) {
                    v.push(*p);
                }
                rows.push((r.id.clone(), ensemble_predict(&preds)?));
            }
            write_scores(&common.out.join("ensemble_scores.csv"), &rows)?;
            save_json(&common.out.join("ensemble.json"), &members)?;
            let mut out = vec![m("members", members.len())];
            if items.iter().all(|r| r.score.is_some()) && items.len() >= 2 {
                let ids: Vec<String> = items.iter().map(|r| r.id.clone()).collect();
                let truth: Vec<f64> = items.iter().map(|r| r.score.unwrap()).collect();
                let pred: Vec<f64> = rows.iter().map(|r| r.1).collect();
                let rep = write_report(&common.out, "ensemble", &ids, &pred, &truth)?;
                out.extend(regression_metrics("", &rep));
                let worst = per_member
                    .iter()
                    .map(|p| ramil_core::evaluation::rmse(p, &truth))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold(0.0, f64::max);
                out.push(m("max_member_rmse", f4(worst)));
            }
            Ok(out)
        }
        Command::Explain {
            common,
            data,
            image,
            checkpoint,
            landmarks,
            reference_landmarks,
        } => {
            let cfg = prepare(&common)?;
            let pipe = load_pipeline(&checkpoint, None, landmarks.as_deref(), reference_landmarks)?;
            let ds = load_data(&cfg, data.manifest.as_deref())?;
            let r = ds
                .items
                .iter()
                .find(|r| r.id == image)
                .ok_or_else(|| Error::InvalidInput(format!("no radiograph with id {image:?} in the manifest")))?;
            let bag = pipe.bag(r)?;
            let rep = explain(&pipe.model, &bag, &pipe.standardizer)?;
            let dir = common.out.join("explain");
            mkdir(&dir)?;
            let txt = dir.join(format!("{image}_attention.txt"));
            fs::write(&txt, rep.to_text()).map_err(|e| Error::Io { path: txt.clone(), source: e })?;
            save_rgb(&render_overlay(&r.image, &rep), &dir.join(format!("{image}_overlay.png")))?;
            // re-read what was written
            let text = fs::read_to_string(&txt).map_err(|e| Error::Io { path: txt.clone(), source: e })?;
            let weights = AttentionReport::parse_weights(&text)?;
            let sum: f64 = weights.iter().map(|w| w.1).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("attention weights sum to {sum}")));
            }
            Ok(vec![
                m("patches", weights.len()),
                m("weight_sum", format!("{sum:.9}")),
                m("prediction", f4(rep.prediction)),
            ])
        }
        Command::Report { common, checkpoints } => {
            prepare(&common)?;
            let mut lines = vec!["| run | scheme | best epoch | val RMSE | test PCC | test MAE | test RMSE |".to_string()];
            lines.push("|---|---|---|---|---|---|---|".into());
            let mut best: Option<(f64, String)> = None;
            for c in &checkpoints {
                let s: RunSummary = load_json(&c.join(RUN_SUMMARY))?;
                let opt = |v: Option<f64>| v.map(f4).unwrap_or_else(|| "-".into());
                let t = s.test.as_ref();
                lines.push(format!(
                    "| {} | {} | {} | {} | {} | {} | {} |",
                    c.display(),
                    s.scheme,
                    s.best_epoch,
                    opt(s.val_rmse),
                    opt(t.map(|t| t.pcc)),
                    opt(t.map(|t| t.mae)),
                    opt(t.map(|t| t.rmse)),
                ));
                if let Some(t) = t {
                    if best.as_ref().is_none_or(|b| t.rmse < b.0) {
                        best = Some((t.rmse, c.display().to_string()));
                    }
                }
            }
            let path = common.out.join("report.md");
            fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::Io { path, source: e })?;
            let mut out = vec![m("runs", checkpoints.len())];
            if let Some((r, run)) = best {
                out.push(m("best_test_rmse", f4(r)));
                out.push(m("best_run", run));
            }
            Ok(out)
        }
    }
}
