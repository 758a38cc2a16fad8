//! Stage-per-directory experiment pipeline.
//!
//! Every stage reads its inputs from upstream stage directories under the
//! output root and writes into its own directory. A stage first removes its
//! completion marker, writes its files, and then writes the marker listing
//! each file with its SHA-256. Downstream stages refuse to run without the
//! markers they depend on, so a crashed stage never passes for a finished
//! one. `manifest.json` at the root lists every marked artifact and is
//! rewritten after each stage.
//!
//! | stage        | outputs                                                            |
//! |--------------|--------------------------------------------------------------------|
//! | `generate`   | segments.csv, speeds.csv, queries.csv, injected_events.csv, world.json |
//! | `preprocess` | filtered_queries.csv, tensor.csv, speeds_15min.csv, windows_{train,test}.{bin,json}, summary.json |
//! | `events`     | events.csv, density.json, recovery.json                            |
//! | `qi`         | qi.csv                                                             |
//! | `train`      | `<variant>_seed<k>.ckpt`, `<variant>_seed<k>.log.jsonl`            |
//! | `evaluate`   | report.csv, report.md, metrics.json                                |
//! | `gradcheck`  | gradcheck.json                                                     |
//!
//! Outputs contain no timestamps or timings, so re-running a stage on
//! unchanged inputs reproduces its files byte for byte.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{dense_mask, err_e_mask, event_speed_correlation, historical_average, persistence, MetricReport, ModelMetrics};
use crate::events::{discover_events, event_stats};
use crate::impact::compute_query_impact;
use crate::io;
use crate::models::{check_gradients, predict_kmh, train, ForecastData, Model, ModelKind, TrainingConfig};
use crate::network::{build_graph, RoadNetwork};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::query::{build_arrival_tensor, preprocess};
use crate::speed::{smooth_and_resample, SpeedSeries, WindowKey, WindowSet, RAW_STEP_S};
use crate::synth::{gen_world, match_events, validate_world, CORRELATION_PAD_BINS};

pub const STAGES: [&str; 7] = ["generate", "preprocess", "events", "qi", "train", "evaluate", "gradcheck"];
pub const MARKER: &str = ".done";
pub const MANIFEST: &str = "manifest.json";
const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output root, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub stage: String,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&data)), data.len() as u64))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub raw_queries: usize,
    pub after_dedup: usize,
    pub after_proximity: usize,
    pub tensor_nnz: usize,
    pub tensor_total: u64,
    pub tensor_density: f64,
    pub tensor_skipped: usize,
    pub segments: usize,
    pub bins: usize,
    pub split_bin: usize,
    pub train_windows: usize,
    pub train_dropped: usize,
    pub test_windows: usize,
    pub test_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub injected: usize,
    pub discovered: usize,
    pub recovered: usize,
    pub tolerance_bins: usize,
    pub matched: Vec<bool>,
    /// Spearman correlation between average nearby speed and query counts.
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: ModelKind,
    pub seed: u64,
    pub kept_epoch: usize,
    pub metrics: ModelMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub test_windows: usize,
    pub event_mask_pairs: usize,
    pub runs: Vec<RunMetrics>,
    /// Baselines followed by the per-variant medians over seeds.
    pub report: MetricReport,
}

impl Evaluation {
    pub fn median_overall(&self, name: &str, err_e: bool) -> Option<f64> {
        let m = self.report.get(name)?;
        if err_e {
            m.err_e.overall
        } else {
            m.err_t.overall
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub variant: ModelKind,
    pub teacher_forcing: bool,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst: Option<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub checks: Vec<Check>,
}

impl ReproReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

pub const PERSISTENCE: &str = "Persistence";
pub const HISTORICAL_AVERAGE: &str = "Historical average";

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Pipeline {
    /// Validates `cfg`, creates `out` and records the effective config there.
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Pipeline> {
        cfg.validate()?;
        let out = out.into();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let p = Pipeline { cfg, out };
        let path = p.out.join(CONFIG_FILE);
        fs::write(&path, p.cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(p)
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    fn file(&self, stage: &str, name: &str) -> PathBuf {
        self.dir(stage).join(name)
    }

    fn marker_path(&self, stage: &str, name: &str) -> PathBuf {
        if name.is_empty() {
            self.file(stage, MARKER)
        } else {
            self.file(stage, &format!("{name}{MARKER}"))
        }
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.marker_path(stage, "").is_file()
    }

    fn require(&self, stage: &str) -> Result<()> {
        if self.is_done(stage) {
            Ok(())
        } else {
            Err(Error::Missing(format!(
                "stage `{stage}` has not completed under {}; run `qtraffic {stage}` first",
                self.out.display()
            )))
        }
    }

    /// Creates the stage directory and invalidates the named marker.
    fn begin(&self, stage: &str, marker: &str) -> Result<PathBuf> {
        let dir = self.dir(stage);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let m = self.marker_path(stage, marker);
        if m.exists() {
            fs::remove_file(&m).map_err(|e| Error::io(&m, e))?;
        }
        Ok(dir)
    }

    fn finish(&self, stage: &str, marker: &str, files: &[String]) -> Result<()> {
        let mut artifacts = Vec::with_capacity(files.len());
        for name in files {
            let (sha256, bytes) = sha256_file(&self.file(stage, name))?;
            artifacts.push(Artifact {
                path: format!("{stage}/{name}"),
                sha256,
                bytes,
            });
        }
        write_json(
            &self.marker_path(stage, marker),
            &Marker {
                stage: stage.to_string(),
                artifacts,
            },
        )?;
        self.write_manifest().map(|_| ())
    }

    /// Collects every marker under the root into `manifest.json`.
    pub fn write_manifest(&self) -> Result<Manifest> {
        let mut artifacts = Vec::new();
        let (sha256, bytes) = sha256_file(&self.out.join(CONFIG_FILE))?;
        artifacts.push(Artifact {
            path: CONFIG_FILE.into(),
            sha256,
            bytes,
        });
        for stage in STAGES {
            let dir = self.dir(stage);
            let Ok(entries) = fs::read_dir(&dir) else { continue };
            let mut markers: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(MARKER)))
                .collect();
            markers.sort();
            for m in markers {
                artifacts.extend(read_json::<Marker>(&m)?.artifacts);
            }
        }
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            schema_version: 1,
            artifacts,
        };
        write_json(&self.out.join(MANIFEST), &manifest)?;
        Ok(manifest)
    }

    fn network(&self) -> Result<RoadNetwork> {
        build_graph(io::read_segments(&self.file("generate", "segments.csv"))?)
    }

    fn smoothed_speeds(&self) -> Result<Vec<SpeedSeries>> {
        let c = &self.cfg;
        io::read_speeds(&self.file("preprocess", "speeds_15min.csv"), c.world.t0, c.bin_seconds(), c.bins())
    }

    fn forecast_data(&self, net: &RoadNetwork, with_qi: bool) -> Result<ForecastData> {
        let c = &self.cfg;
        let speeds = self.smoothed_speeds()?;
        let qi = if with_qi {
            let ids = net.segments().iter().map(|s| s.link_id.clone()).collect();
            Some(io::read_qi(&self.file("qi", "qi.csv"), ids, c.world.t0, c.bin_seconds(), c.bins())?)
        } else {
            None
        };
        ForecastData::build(net, &speeds, qi.as_ref(), &c.calendar, c.split_bin(), c.model.shape)
    }

    /// Window keys stored by `preprocess`, checked against the rebuilt data.
    fn window_keys(&self, data: &ForecastData, which: &str) -> Result<Vec<WindowKey>> {
        let bin = self.file("preprocess", &format!("windows_{which}.bin"));
        let json = self.file("preprocess", &format!("windows_{which}.json"));
        let stored = WindowSet::load(&bin, &json)?;
        let rebuilt = data.window_set(&stored.keys, stored.dropped);
        if rebuilt != stored {
            return Err(Error::format(
                bin.display().to_string(),
                "windows do not match the smoothed speed table; rerun `qtraffic preprocess`",
            ));
        }
        Ok(stored.keys)
    }

    pub fn generate(&self) -> Result<()> {
        let dir = self.begin("generate", "")?;
        let world = gen_world(&self.cfg.world)?;
        io::write_segments(&dir.join("segments.csv"), &world.segments)?;
        io::write_speeds(&dir.join("speeds.csv"), &world.speeds)?;
        io::write_queries(&dir.join("queries.csv"), &world.queries)?;
        io::write_injected_events(&dir.join("injected_events.csv"), &world.events)?;
        let diagnostics = validate_world(&world, &self.cfg.events)?;
        write_json(&dir.join("world.json"), &diagnostics)?;
        let files = ["segments.csv", "speeds.csv", "queries.csv", "injected_events.csv", "world.json"];
        self.finish("generate", "", &files.map(String::from))
    }

    pub fn preprocess(&self) -> Result<PreprocessSummary> {
        self.require("generate")?;
        let c = &self.cfg;
        let dir = self.begin("preprocess", "")?;
        let raw = io::read_queries(&self.file("generate", "queries.csv"))?;
        let pre = preprocess(raw, &c.world.grid)?;
        io::write_filtered_queries(&dir.join("filtered_queries.csv"), &pre.queries)?;
        let tensor = build_arrival_tensor(&pre.queries, &c.world.grid, c.world.t0, c.bin_seconds(), c.bins());
        io::write_tensor(&dir.join("tensor.csv"), &tensor)?;

        let net = self.network()?;
        let raw_speeds = io::read_speeds(&self.file("generate", "speeds.csv"), c.world.t0, RAW_STEP_S, c.world.minutes())?;
        let smoothed = raw_speeds
            .iter()
            .map(|s| smooth_and_resample(s, c.speed.window, c.speed.stride))
            .collect::<Result<Vec<_>>>()?;
        io::write_speeds(&dir.join("speeds_15min.csv"), &smoothed)?;

        let data = ForecastData::build(&net, &smoothed, None, &c.calendar, c.split_bin(), c.model.shape)?;
        let (train_keys, train_dropped) = data.train_keys(c.windows.train_stride);
        let (test_keys, test_dropped) = data.test_keys(c.windows.test_stride);
        data.window_set(&train_keys, train_dropped)
            .save(&dir.join("windows_train.bin"), &dir.join("windows_train.json"))?;
        data.window_set(&test_keys, test_dropped)
            .save(&dir.join("windows_test.bin"), &dir.join("windows_test.json"))?;
        let summary = PreprocessSummary {
            raw_queries: pre.raw_count,
            after_dedup: pre.after_dedup,
            after_proximity: pre.after_proximity,
            tensor_nnz: tensor.nnz(),
            tensor_total: tensor.total(),
            tensor_density: tensor.density(),
            tensor_skipped: tensor.skipped,
            segments: data.segments.len(),
            bins: data.bins,
            split_bin: data.split,
            train_windows: train_keys.len(),
            train_dropped,
            test_windows: test_keys.len(),
            test_dropped,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        let files = [
            "filtered_queries.csv",
            "tensor.csv",
            "speeds_15min.csv",
            "windows_train.bin",
            "windows_train.json",
            "windows_test.bin",
            "windows_test.json",
            "summary.json",
        ];
        self.finish("preprocess", "", &files.map(String::from))?;
        Ok(summary)
    }

    pub fn events(&self) -> Result<Recovery> {
        self.require("preprocess")?;
        let c = &self.cfg;
        let dir = self.begin("events", "")?;
        let tensor = io::read_tensor(&self.file("preprocess", "tensor.csv"), c.world.grid, c.world.t0, c.bin_seconds(), c.bins())?;
        let queries = io::read_filtered_queries(&self.file("preprocess", "filtered_queries.csv"))?;
        let found = discover_events(&tensor, &c.events, &queries);
        io::write_events(&dir.join("events.csv"), &found)?;
        write_json(&dir.join("density.json"), &event_stats(&found, &tensor))?;

        let truth_path = self.file("generate", "injected_events.csv");
        let truth = if truth_path.exists() { io::read_injected_events(&truth_path)? } else { Vec::new() };
        let tol = c.acceptance.recovery_tolerance_bins;
        let matched = match_events(&truth, &found, tol);
        let net = self.network()?;
        let speeds = self.smoothed_speeds()?;
        let recovery = Recovery {
            injected: truth.len(),
            discovered: found.len(),
            recovered: matched.iter().filter(|m| **m).count(),
            tolerance_bins: tol,
            matched,
            spearman: event_speed_correlation(&found, &tensor, &net, &speeds, CORRELATION_PAD_BINS)?,
        };
        write_json(&dir.join("recovery.json"), &recovery)?;
        self.finish("events", "", &["events.csv", "density.json", "recovery.json"].map(String::from))?;
        Ok(recovery)
    }

    pub fn qi(&self) -> Result<()> {
        self.require("preprocess")?;
        let c = &self.cfg;
        let dir = self.begin("qi", "")?;
        let queries = io::read_filtered_queries(&self.file("preprocess", "filtered_queries.csv"))?;
        let net = self.network()?;
        let qi = compute_query_impact(&queries, &net, &c.impact, c.world.t0, c.bin_seconds(), c.bins())?;
        io::write_qi(&dir.join("qi.csv"), &qi)?;
        self.finish("qi", "", &["qi.csv".to_string()])
    }

    fn run_name(kind: ModelKind, seed: u64) -> String {
        format!("{}_seed{seed}", kind.as_str())
    }

    /// Trains every replicate of `kind` and marks `train/<kind>.done`.
    pub fn train_variant(&self, kind: ModelKind) -> Result<()> {
        self.require("preprocess")?;
        self.require("qi")?;
        let c = &self.cfg;
        let dir = self.begin("train", kind.as_str())?;
        let net = self.network()?;
        let data = self.forecast_data(&net, true)?;
        let keys = self.window_keys(&data, "train")?;
        let cut = data.split - c.windows.validation_days * 96;
        let (fit, val): (Vec<WindowKey>, Vec<WindowKey>) = keys.iter().partition(|k| k.start + data.span() <= cut);
        let mut files = Vec::new();
        for seed in c.model.seeds(c.training.seed) {
            let name = Self::run_name(kind, seed);
            let log_path = dir.join(format!("{name}.log.jsonl"));
            let log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut log = BufWriter::new(log_file);
            let tc = TrainingConfig {
                seed,
                ..c.training.clone()
            };
            let mut model = Model::new(kind, c.model.shape, seed)?;
            let outcome = train(&mut model, &data, &fit, &val, &tc, Some(&mut log))?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let meta = serde_json::json!({
                "shape": c.model.shape,
                "kept_epoch": outcome.kept_epoch,
                "steps": outcome.steps,
                "train_windows": fit.len(),
                "validation_windows": val.len(),
            });
            save_checkpoint(&dir.join(format!("{name}.ckpt")), &model.params, kind.as_str(), meta)?;
            files.push(format!("{name}.ckpt"));
            files.push(format!("{name}.log.jsonl"));
        }
        self.finish("train", kind.as_str(), &files)
    }

    pub fn train(&self, variant: Option<ModelKind>) -> Result<()> {
        match variant {
            Some(k) => self.train_variant(k),
            None => self.cfg.model.variants.iter().try_for_each(|k| self.train_variant(*k)),
        }
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        self.require("preprocess")?;
        self.require("events")?;
        self.require("qi")?;
        let c = &self.cfg;
        let missing: Vec<String> = c
            .model
            .variants
            .iter()
            .filter(|k| !self.marker_path("train", k.as_str()).is_file())
            .map(|k| {
                let runs: Vec<String> = c.model.seeds(c.training.seed).iter().map(|s| format!("{}.ckpt", Self::run_name(*k, *s))).collect();
                format!("{} ({})", k.as_str(), runs.join(", "))
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::Missing(format!(
                "checkpoints for {} under {}; run `qtraffic train` first",
                missing.join("; "),
                self.dir("train").display()
            )));
        }
        let dir = self.begin("evaluate", "")?;
        let net = self.network()?;
        let data = self.forecast_data(&net, true)?;
        let keys = self.window_keys(&data, "test")?;
        let found = io::read_events(&self.file("events", "events.csv"))?;
        let mask = err_e_mask(&found, &net, &c.world.grid);
        let dense = dense_mask(&mask, &data);

        let mut rows = vec![
            ModelMetrics::compute(PERSISTENCE, &data, &keys, &persistence(&data, &keys)?, &dense)?,
            ModelMetrics::compute(HISTORICAL_AVERAGE, &data, &keys, &historical_average(&data, &keys), &dense)?,
        ];
        let mut runs = Vec::new();
        for kind in &c.model.variants {
            let mut per_seed = Vec::new();
            for seed in c.model.seeds(c.training.seed) {
                let path = self.file("train", &format!("{}.ckpt", Self::run_name(*kind, seed)));
                let (header, params) = load_checkpoint(&path)?;
                if header.variant != kind.as_str() {
                    return Err(Error::format(path.display().to_string(), format!("holds variant {}", header.variant)));
                }
                let model = Model::with_params(*kind, c.model.shape, params)?;
                let pred = predict_kmh(&model, &data, &keys, 512)?;
                let metrics = ModelMetrics::compute(kind.label(), &data, &keys, &pred, &dense)?;
                per_seed.push(metrics.clone());
                runs.push(RunMetrics {
                    variant: *kind,
                    seed,
                    kept_epoch: header.meta.get("kept_epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
                    metrics,
                });
            }
            rows.extend(ModelMetrics::median(kind.label(), &per_seed));
        }
        let report = MetricReport {
            t_prime: c.model.shape.t_prime,
            bin_minutes: c.bin_seconds() / 60,
            rows,
        };
        let report_csv = dir.join("report.csv");
        fs::write(&report_csv, report.to_csv()).map_err(|e| Error::io(&report_csv, e))?;
        let report_md = dir.join("report.md");
        let md = format!(
            "Median over {} training runs per model; {} test windows.\n\n{}",
            c.model.replicates,
            keys.len(),
            report.to_markdown()
        );
        fs::write(&report_md, md).map_err(|e| Error::io(&report_md, e))?;
        let evaluation = Evaluation {
            test_windows: keys.len(),
            event_mask_pairs: mask.len(),
            runs,
            report,
        };
        write_json(&dir.join("metrics.json"), &evaluation)?;
        self.finish("evaluate", "", &["report.csv", "report.md", "metrics.json"].map(String::from))?;
        Ok(evaluation)
    }

    pub fn gradcheck(&self) -> Result<Vec<GradCheckEntry>> {
        let g = &self.cfg.gradcheck;
        let dir = self.begin("gradcheck", "")?;
        let mut entries = Vec::new();
        for kind in &self.cfg.model.variants {
            for tf in [true, false] {
                let r = check_gradients(*kind, g.shape, g.batch, tf, &g.check)?;
                entries.push(GradCheckEntry {
                    variant: *kind,
                    teacher_forcing: tf,
                    coords: r.checks.len(),
                    max_rel_error: r.max_rel_error(),
                    worst: r.worst().map(|w| format!("{}[{}]", w.tensor, w.index)),
                    passed: r.passed(),
                });
            }
        }
        write_json(&dir.join("gradcheck.json"), &entries)?;
        self.finish("gradcheck", "", &["gradcheck.json".to_string()])?;
        Ok(entries)
    }

    /// Runs every stage and scores the configured acceptance thresholds.
    pub fn repro(&self) -> Result<ReproReport> {
        let a = self.cfg.acceptance;
        self.generate()?;
        self.preprocess()?;
        let recovery = self.events()?;
        self.qi()?;
        self.train(None)?;
        let evaluation = self.evaluate()?;
        let grads = self.gradcheck()?;

        let mut checks = vec![
            Check {
                name: "event recovery".into(),
                passed: recovery.recovered >= a.min_recovered_events,
                detail: format!(
                    "{}/{} injected events recovered within {} bin(s), need {}",
                    recovery.recovered, recovery.injected, recovery.tolerance_bins, a.min_recovered_events
                ),
            },
            Check {
                name: "speed/query correlation".into(),
                passed: recovery.spearman.is_some_and(|r| r <= a.max_spearman),
                detail: format!("Spearman {}, need <= {}", show(recovery.spearman), a.max_spearman),
            },
            Check {
                name: "gradient check".into(),
                passed: grads.iter().all(|g| g.passed),
                detail: format!(
                    "max relative error {:.3e} over {} checks",
                    grads.iter().map(|g| g.max_rel_error).fold(0.0, f64::max),
                    grads.len()
                ),
            },
        ];
        let err = |name: &str, e: bool| evaluation.median_overall(name, e);
        if a.require_ordering {
            let base = err(ModelKind::Seq2seq.label(), true);
            for kind in [ModelKind::Hybrid, ModelKind::Seq2seqQi] {
                let v = err(kind.label(), true);
                checks.push(Check {
                    name: format!("Err_E {} < Seq2Seq", kind.label()),
                    passed: matches!((v, base), (Some(v), Some(b)) if v < b),
                    detail: format!("median Err_E {} vs {}", show(v), show(base)),
                });
            }
        }
        if a.require_beats_persistence {
            let p = err(PERSISTENCE, false);
            for kind in &self.cfg.model.variants {
                let v = err(kind.label(), false);
                checks.push(Check {
                    name: format!("Err_T {} < persistence", kind.label()),
                    passed: matches!((v, p), (Some(v), Some(p)) if v < p),
                    detail: format!("median Err_T {} vs {}", show(v), show(p)),
                });
            }
        }
        let report = ReproReport { checks };
        write_json(&self.out.join("acceptance.json"), &report)?;
        Ok(report)
    }
}
