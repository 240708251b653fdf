//! End-to-end workflow: pretrain → prune → plan → distill → eval, driven by
//! one TOML run configuration.
//!
//! Every stage leaves its artifacts in the output directory and finishes by
//! writing a small JSON "section" file. A stage counts as done once its
//! section exists, which is what resuming keys on. `report.json` is built
//! only from sections and holds no timings or absolute paths, so identical
//! configs give byte-identical reports. Wall-clock data goes to `run.json`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{synth, ImageSet};
use crate::distill::{run_distillation_logged, DistillSummary, KDConfig, Teacher};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::model::{estimate_flops, srwt, ModelConfig, ParamCount, SRModel};
use crate::planner::{plan, verify_plan, CompressionPlan, RoundingMode, VerificationReport};
use crate::prune::{run_pruning_logged, PruneConfig, PruneReport};
use crate::train::{pretrain_logged, sub_seed, JsonLines, PretrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Prune,
    Plan,
    Distill,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Pretrain,
        Stage::Prune,
        Stage::Plan,
        Stage::Distill,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Prune => "prune",
            Stage::Plan => "plan",
            Stage::Distill => "distill",
            Stage::Eval => "eval",
        }
    }

    /// File name of the section that marks this stage complete.
    pub fn section_file(self) -> String {
        format!("{}.json", self.name())
    }

    fn seed_stream(self) -> u64 {
        100 + self as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

pub const TEACHER_FILE: &str = "teacher.srwt";
pub const PRUNED_FILE: &str = "pruned.srwt";
pub const STUDENT_FILE: &str = "student.srwt";
pub const REPORT_FILE: &str = "report.json";
pub const RUN_FILE: &str = "run.json";

fn all_stages() -> Vec<Stage> {
    Stage::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Output directory for artifacts, logs and reports.
    pub out: PathBuf,
    /// Directory of HR training PNGs. Synthetic scenes are generated when absent.
    #[serde(default)]
    pub train: Option<PathBuf>,
    /// Directory of held-out HR PNGs. Synthetic scenes are generated when absent.
    #[serde(default)]
    pub eval: Option<PathBuf>,
    /// Existing teacher checkpoint, used when the pretrain stage is not run.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_images: usize,
    pub eval_images: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_images: 20,
            eval_images: 4,
            height: 96,
            width: 96,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Images (in file-name order) used for sparsity fine-tuning.
    pub prune_images: usize,
    /// Images used for pretraining and distillation.
    pub distill_images: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            prune_images: 10,
            distill_images: 20,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub mode: RoundingMode,
    /// Use this density instead of the measured one.
    pub density: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Pixels trimmed per side before metrics; the scale factor when unset.
    pub border: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every stochastic component derives its seed from this one.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "all_stages")]
    pub stages: Vec<Stage>,
    pub paths: PathsConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub teacher: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub distill: KDConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parse a TOML file; relative paths are taken from the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.out);
        for p in [
            &mut self.paths.train,
            &mut self.paths.eval,
            &mut self.paths.teacher,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Short stable id: the first 16 hex digits of SHA-256 over the config.
    pub fn run_id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    fn stage_seed(&self, stage: Stage) -> u64 {
        sub_seed(self.seed, stage.seed_stream())
    }

    /// Check fields and that every stage's inputs are produced earlier in
    /// the list or already exist on disk.
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.prune.validate()?;
        self.distill.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("no stages selected".into()));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stages must be distinct and in workflow order (pretrain, prune, plan, distill, eval); got {:?}",
                self.stages.iter().map(|s| s.name()).collect::<Vec<_>>()
            )));
        }
        if let Some(d) = self.plan.density {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Domain(format!(
                    "plan.density must lie in (0, 1], got {d}"
                )));
            }
        }
        let out = &self.paths.out;
        let runs = |s: Stage| self.stages.contains(&s);
        let on_disk = |s: Stage| out.join(s.section_file()).is_file();
        let has_teacher = runs(Stage::Pretrain)
            || on_disk(Stage::Pretrain)
            || self.paths.teacher.as_ref().is_some_and(|p| p.is_file());
        let needs = |stage: Stage, what: &str, ok: bool| -> Result<()> {
            if runs(stage) && !ok {
                Err(Error::Config(format!(
                    "stage `{stage}` needs {what}, which no earlier stage produces and {} does not contain",
                    out.display()
                )))
            } else {
                Ok(())
            }
        };
        needs(Stage::Prune, "a teacher", has_teacher)?;
        needs(
            Stage::Plan,
            "a density (prune stage or plan.density)",
            runs(Stage::Prune) || on_disk(Stage::Prune) || self.plan.density.is_some(),
        )?;
        needs(Stage::Distill, "a teacher", has_teacher)?;
        needs(
            Stage::Distill,
            "a plan",
            runs(Stage::Plan) || on_disk(Stage::Plan),
        )?;
        needs(Stage::Eval, "a teacher", has_teacher)?;
        needs(
            Stage::Eval,
            "a student",
            runs(Stage::Distill) || on_disk(Stage::Distill),
        )?;
        Ok(())
    }

    pub fn effective_pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.stage_seed(Stage::Pretrain),
            ..self.pretrain
        }
    }

    pub fn effective_prune(&self) -> PruneConfig {
        PruneConfig {
            seed: self.stage_seed(Stage::Prune),
            ..self.prune
        }
    }

    pub fn effective_distill(&self) -> KDConfig {
        KDConfig {
            seed: self.stage_seed(Stage::Distill),
            ..self.distill
        }
    }

    /// Seed for the student's initial weights.
    pub fn student_init_seed(&self) -> u64 {
        sub_seed(self.stage_seed(Stage::Distill), 1)
    }
}

// ---- sections -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSection {
    pub model: ModelConfig,
    pub params: ParamCount,
    pub config: PretrainConfig,
    pub train_images: usize,
    pub final_loss: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSection {
    pub student: ModelConfig,
    pub init_seed: u64,
    pub config: KDConfig,
    pub train_images: usize,
    pub summary: DistillSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub images: usize,
    pub teacher: EvalResult,
    pub student: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub config: ModelConfig,
    pub params: ParamCount,
    /// Forward cost at a 1280×720 output.
    pub flops_720p: f64,
}

impl ModelSummary {
    pub fn of(config: ModelConfig) -> Self {
        Self {
            config,
            params: ParamCount::for_config(&config),
            flops_720p: estimate_flops(&config, 720, 1280),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactSection {
    pub teacher: ModelSummary,
    pub student: ModelSummary,
    /// Exact total parameters, student over teacher.
    pub compression_ratio: f64,
    pub verification: VerificationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowReport {
    pub run_id: String,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub pretrain: Option<PretrainSection>,
    pub prune: Option<PruneReport>,
    pub plan: Option<CompressionPlan>,
    pub compact: Option<CompactSection>,
    pub distill: Option<DistillSection>,
    pub eval: Option<EvalSection>,
}

// ---- run record -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seconds: f64,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<String>,
    pub log: Option<String>,
}

/// Non-deterministic bookkeeping for one output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub run_id: String,
    /// Frozen when the run starts; resuming with a different config fails.
    pub config: RunConfig,
    pub completed: Vec<Stage>,
    pub records: Vec<StageRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Skip stages whose section already exists from an earlier attempt.
    pub resume: bool,
    /// Abort with a stage error right before this stage starts. For testing
    /// failure handling.
    pub fail_before: Option<Stage>,
}

// ---- file helpers -----------------------------------------------------------

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn read_section<T: DeserializeOwned>(out: &Path, stage: Stage) -> Result<Option<T>> {
    let path = out.join(stage.section_file());
    if path.is_file() {
        read_json(&path).map(Some)
    } else {
        Ok(None)
    }
}

// ---- workflow ---------------------------------------------------------------

struct Workflow<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    train: Option<ImageSet>,
    eval: Option<ImageSet>,
}

impl Workflow<'_> {
    fn dataset(
        &self,
        dir: &Option<PathBuf>,
        name: &str,
        count: usize,
        stream: u64,
    ) -> Result<ImageSet> {
        if let Some(dir) = dir {
            return ImageSet::load_dir(dir);
        }
        let syn = self.cfg.data.synthetic;
        let dir = self.out.join("data").join(name);
        if !dir.is_dir() {
            info!(
                "generating {count} synthetic {name} images in {}",
                dir.display()
            );
            synth::write_dataset(
                &dir,
                count,
                syn.height,
                syn.width,
                sub_seed(self.cfg.seed, stream),
            )?;
        }
        ImageSet::load_dir(&dir)
    }

    fn train_set(&mut self) -> Result<&ImageSet> {
        if self.train.is_none() {
            let n = self.cfg.data.synthetic.train_images;
            self.train = Some(self.dataset(&self.cfg.paths.train, "train", n, 200)?);
        }
        Ok(self.train.as_ref().expect("loaded"))
    }

    fn eval_set(&mut self) -> Result<&ImageSet> {
        if self.eval.is_none() {
            let n = self.cfg.data.synthetic.eval_images;
            self.eval = Some(self.dataset(&self.cfg.paths.eval, "eval", n, 201)?);
        }
        Ok(self.eval.as_ref().expect("loaded"))
    }

    fn teacher(&self) -> Result<SRModel> {
        let local = self.out.join(TEACHER_FILE);
        let path = match &self.cfg.paths.teacher {
            Some(p) if !self.cfg.stages.contains(&Stage::Pretrain) => p.clone(),
            _ => local,
        };
        let model = srwt::load(&path)?;
        if *model.config() != self.cfg.teacher {
            return Err(Error::Config(format!(
                "{} holds a {:?} model but the run config declares {:?}",
                path.display(),
                model.config(),
                self.cfg.teacher
            )));
        }
        Ok(model)
    }

    fn density(&self) -> Result<f64> {
        if let Some(d) = self.cfg.plan.density {
            return Ok(d);
        }
        let report: PruneReport = read_section(self.out, Stage::Prune)?
            .ok_or_else(|| Error::Config("no prune report to take the density from".into()))?;
        Ok(report.density)
    }

    fn plan(&self) -> Result<CompressionPlan> {
        read_section(self.out, Stage::Plan)?.ok_or_else(|| Error::Config("no plan found".into()))
    }

    fn log_path(&self, stage: Stage) -> String {
        format!("{}.jsonl", stage.name())
    }

    /// Run one stage; returns the files it wrote (relative names).
    fn run(&mut self, stage: Stage) -> Result<(Vec<String>, Option<String>)> {
        let out = self.out.to_path_buf();
        match stage {
            Stage::Pretrain => {
                let pcfg = self.cfg.effective_pretrain();
                let log = self.log_path(stage);
                let mut lines = JsonLines::create(out.join(&log))?;
                let n = self.cfg.data.distill_images;
                let set = self.train_set()?.take(n);
                let mut final_loss = None;
                let model = pretrain_logged(self.cfg.teacher, &set, &pcfg, |r| {
                    final_loss = Some(r.loss);
                    lines.append(r)
                })?;
                lines.finish()?;
                srwt::save(&model, out.join(TEACHER_FILE))?;
                write_json(
                    out.join(stage.section_file()),
                    &PretrainSection {
                        model: self.cfg.teacher,
                        params: model.param_count(),
                        config: pcfg,
                        train_images: set.len(),
                        final_loss,
                    },
                )?;
                Ok((vec![TEACHER_FILE.into(), stage.section_file()], Some(log)))
            }
            Stage::Prune => {
                let pcfg = self.cfg.effective_prune();
                let mut model = self.teacher()?;
                let log = self.log_path(stage);
                let mut lines = JsonLines::create(out.join(&log))?;
                let n = self.cfg.data.prune_images;
                let set = self.train_set()?.take(n);
                let report = run_pruning_logged(&mut model, &set, &pcfg, |r| lines.append(r))?;
                lines.finish()?;
                srwt::save(&model, out.join(PRUNED_FILE))?;
                write_json(out.join(stage.section_file()), &report)?;
                info!("measured density d = {:.6}", report.density);
                Ok((vec![PRUNED_FILE.into(), stage.section_file()], Some(log)))
            }
            Stage::Plan => {
                let d = self.density()?;
                let p = plan(&self.cfg.teacher, d, self.cfg.plan.mode)?;
                info!(
                    "plan: ({}, {}, {}) -> ({}, {}, {})",
                    p.source.n_c,
                    p.source.n_l,
                    p.source.n_b,
                    p.target.n_c,
                    p.target.n_l,
                    p.target.n_b
                );
                write_json(out.join(stage.section_file()), &p)?;
                Ok((vec![stage.section_file()], None))
            }
            Stage::Distill => {
                let p = self.plan()?;
                let teacher = self.teacher()?;
                let kcfg = self.cfg.effective_distill();
                let init_seed = self.cfg.student_init_seed();
                let mut student = SRModel::build(p.target, init_seed)?;
                let log = self.log_path(stage);
                let mut lines = JsonLines::create(out.join(&log))?;
                let n = self.cfg.data.distill_images;
                let set = self.train_set()?.take(n);
                let summary = run_distillation_logged(
                    &mut student,
                    Teacher::Model(&teacher),
                    &set,
                    &kcfg,
                    |r| lines.append(r),
                )?;
                lines.finish()?;
                srwt::save(&student, out.join(STUDENT_FILE))?;
                write_json(
                    out.join(stage.section_file()),
                    &DistillSection {
                        student: p.target,
                        init_seed,
                        config: kcfg,
                        train_images: set.len(),
                        summary,
                    },
                )?;
                Ok((vec![STUDENT_FILE.into(), stage.section_file()], Some(log)))
            }
            Stage::Eval => {
                let teacher = self.teacher()?;
                let student = srwt::load(out.join(STUDENT_FILE))?;
                let border = self.cfg.eval.border;
                let set = self.eval_set()?;
                let section = EvalSection {
                    images: set.len(),
                    teacher: evaluate(&teacher, set, border)?,
                    student: evaluate(&student, set, border)?,
                };
                info!(
                    "eval: teacher {} / student {} (bicubic {})",
                    section.teacher.mean_psnr.0,
                    section.student.mean_psnr.0,
                    section.student.mean_bicubic_psnr.0
                );
                write_json(out.join(stage.section_file()), &section)?;
                Ok((vec![stage.section_file()], None))
            }
        }
    }
}

/// Assemble the report from whatever sections exist in `out`.
pub fn collect_report(cfg: &RunConfig) -> Result<WorkflowReport> {
    let out = cfg.paths.out.as_path();
    let plan: Option<CompressionPlan> = read_section(out, Stage::Plan)?;
    let compact = match &plan {
        Some(p) => {
            let teacher = ModelSummary::of(p.source);
            let student = ModelSummary::of(p.target);
            Some(CompactSection {
                compression_ratio: student.params.total as f64 / teacher.params.total as f64,
                teacher,
                student,
                verification: verify_plan(p)?,
            })
        }
        None => None,
    };
    Ok(WorkflowReport {
        run_id: cfg.run_id(),
        seed: cfg.seed,
        stages: cfg.stages.clone(),
        pretrain: read_section(out, Stage::Pretrain)?,
        prune: read_section(out, Stage::Prune)?,
        plan,
        compact,
        distill: read_section(out, Stage::Distill)?,
        eval: read_section(out, Stage::Eval)?,
    })
}

pub fn run_workflow(cfg: &RunConfig) -> Result<WorkflowReport> {
    run_workflow_with(cfg, RunOptions::default())
}

pub fn run_workflow_with(cfg: &RunConfig, opts: RunOptions) -> Result<WorkflowReport> {
    let out = cfg.paths.out.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let run_id = cfg.run_id();
    let run_path = out.join(RUN_FILE);
    let mut run = match (opts.resume, run_path.is_file()) {
        (true, true) => {
            let prev: TrainRun = read_json(&run_path)?;
            if prev.config != *cfg {
                return Err(Error::Config(format!(
                    "{} was started with a different configuration; refusing to resume",
                    out.display()
                )));
            }
            prev
        }
        _ => {
            // A fresh run must not pick up sections left by an earlier one.
            for s in &cfg.stages {
                let p = out.join(s.section_file());
                if p.is_file() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
            TrainRun {
                run_id: run_id.clone(),
                config: cfg.clone(),
                completed: Vec::new(),
                records: Vec::new(),
            }
        }
    };
    cfg.validate()?;
    write_json(&run_path, &run)?;

    let mut wf = Workflow {
        cfg,
        out,
        train: None,
        eval: None,
    };
    for &stage in &cfg.stages {
        if opts.resume && run.completed.contains(&stage) && out.join(stage.section_file()).is_file()
        {
            info!("{stage}: already complete, reusing artifacts");
            continue;
        }
        if opts.fail_before == Some(stage) {
            return Err(Error::Stage {
                stage: stage.name().into(),
                source: Box::new(Error::Data("simulated failure".into())),
            });
        }
        info!("{stage}: starting");
        let t0 = Instant::now();
        let (artifacts, log) = wf.run(stage).map_err(|e| {
            warn!("{stage} failed: {e}");
            Error::Stage {
                stage: stage.name().into(),
                source: Box::new(e),
            }
        })?;
        run.completed.push(stage);
        run.records.push(StageRecord {
            stage,
            seconds: t0.elapsed().as_secs_f64(),
            artifacts,
            log,
        });
        write_json(&run_path, &run)?;
    }

    let report = collect_report(cfg)?;
    write_json(out.join(REPORT_FILE), &report)?;
    Ok(report)
}
