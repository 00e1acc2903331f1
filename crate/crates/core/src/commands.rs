//! The command-line stages, operating on one run directory:
//!
//! ```text
//! <out>/data/               dataset (images/, masks/, manifest.tsv, config.txt)
//! <out>/base.ckpt           pre-trained denoiser
//! <out>/pretrain_log.tsv
//! <out>/adapter.ckpt        adapter weights
//! <out>/adapter_log.tsv
//! <out>/samples/            generated PNGs, masks, manifest.tsv, contact_sheet.png
//! <out>/report.txt          metric report, key = value
//! <out>/report.tsv          the same metrics as a table
//! <out>/sweep.tsv           guidance-steps × blend-weight grid
//! ```
//!
//! Each stage reads the outputs of the earlier ones and never modifies them.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;

use crate::adapter::AdapterState;
use crate::checkpoint::Checkpoint;
use crate::codec;
use crate::config::RunConfig;
use crate::crossmodal::AseaConfig;
use crate::data::{build_dataset, Dataset, Image, Mask, Split};
use crate::diffusion::{Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::eval::{
    contact_sheet, diversity_proxy, downstream_protocol, localization_ratio, mask_image,
    DownstreamScores, LabeledImage, MetricReport, Overlap, SegmenterConfig, SegmenterTraining,
};
use crate::pipeline::{
    asea_config, dataset_config, denoiser_config, labeled_crop_paste, labeled_split,
    plan_synthesis, pretrain, sampler_config, synthesize, train_adapter, Frozen, Generated,
    StepLog, SynthesisItem, LOG_HEADER,
};

pub const DATA_DIR: &str = "data";
pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.tsv";
pub const ADAPTER_CHECKPOINT: &str = "adapter.ckpt";
pub const ADAPTER_LOG: &str = "adapter_log.tsv";
pub const SAMPLES_DIR: &str = "samples";
pub const SAMPLES_HEADER: &str =
    "index\tbackground_id\treference_id\tkind\tnoise_seed\timage_path\tmask_path\tE_0\tE_Tg";
pub const CONTACT_SHEET: &str = "contact_sheet.png";
pub const REPORT: &str = "report.txt";
pub const REPORT_TSV: &str = "report.tsv";
pub const SWEEP: &str = "sweep.tsv";
pub const SWEEP_HEADER: &str = "asea_steps\tgamma\tlocalization\tE_0\tE_Tg\tdiversity";
/// Guidance-step counts and blend weights of the ablation sweep.
pub const SWEEP_STEPS: [usize; 6] = [0, 1, 2, 3, 4, 5];
pub const SWEEP_GAMMAS: [f64; 2] = [0.0, 1.0];
/// Rows of the sample contact sheet.
const SHEET_ROWS: usize = 8;
/// Timestep at which diversity features are read from the denoiser.
const FEATURE_TIMESTEP: usize = 1;

/// Paths of one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn data(&self) -> PathBuf {
        self.path(DATA_DIR)
    }

    pub fn samples(&self) -> PathBuf {
        self.path(SAMPLES_DIR)
    }

    fn require(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Validation(format!(
                "{} not found; run {stage} first",
                p.display()
            )))
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn is_nonempty_dir(path: &Path) -> Result<bool> {
    match fs::read_dir(path) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Tab-separated step log, one row appended and flushed per step.
struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LogWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = LogWriter {
            path,
            out: BufWriter::new(file),
        };
        w.line(LOG_HEADER)?;
        Ok(w)
    }

    fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn load_dataset(run: &RunDir) -> Result<Dataset> {
    let dir = run.data();
    let manifest = dir.join(crate::data::MANIFEST);
    if !manifest.exists() {
        return Err(Error::Validation(format!(
            "{} not found; run gen-data first",
            manifest.display()
        )));
    }
    Dataset::load(&dir)
}

pub fn load_denoiser(run: &RunDir, config: &RunConfig) -> Result<Denoiser<f32>> {
    let path = run.require(BASE_CHECKPOINT, "pretrain-base")?;
    let mut params = Checkpoint::<f32>::load(&path)?.params;
    params.set_trainable(false);
    Denoiser::from_params(denoiser_config(config), params)
}

/// The trained adapter at the configured blend weight, if its file exists.
pub fn load_adapter(run: &RunDir, config: &RunConfig) -> Result<Option<AdapterState<f32>>> {
    let path = run.path(ADAPTER_CHECKPOINT);
    if !path.exists() {
        return Ok(None);
    }
    let params = Checkpoint::<f32>::load(&path)?.params;
    let blocks = denoiser_config(config).attention_blocks();
    AdapterState::from_params(&blocks, config.feature_width, config.gamma, params).map(Some)
}

/// Adapter for sampling: required whenever the blend weight is nonzero.
fn adapter_for_sampling(run: &RunDir, config: &RunConfig) -> Result<Option<AdapterState<f32>>> {
    let adapter = load_adapter(run, config)?;
    if adapter.is_none() && config.gamma != 0.0 {
        return Err(Error::Config(format!(
            "gamma = {} needs {}; run train-adapter or set gamma = 0",
            config.gamma,
            run.path(ADAPTER_CHECKPOINT).display()
        )));
    }
    Ok(adapter)
}

#[derive(Clone, Debug)]
pub struct GenDataSummary {
    pub samples: usize,
    pub train: usize,
    pub test: usize,
}

/// Writes the procedural dataset. Refuses a non-empty target unless
/// `force` is set, in which case the old dataset is replaced.
pub fn gen_data(config: &RunConfig, run: &RunDir, force: bool) -> Result<GenDataSummary> {
    let dir = run.data();
    if is_nonempty_dir(&dir)? {
        if !force {
            return Err(Error::Validation(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let dataset = build_dataset(&dataset_config(config), config.seed)?;
    create_dir(&dir)?;
    dataset.write(&dir)?;
    write_file(&dir.join("config.txt"), &config.render())?;
    Ok(GenDataSummary {
        samples: dataset.samples.len(),
        train: dataset.split(Split::Train).count(),
        test: dataset.split(Split::Test).count(),
    })
}

fn log_progress(stage: &str, log: &StepLog, every: usize) {
    if log.step.is_multiple_of(every.max(1)) {
        info!(
            "{stage} step {} loss {:.4} E {:.4} -> {:.4} ({:.0}s)",
            log.step, log.loss, log.energy_initial, log.energy_final, log.seconds
        );
    }
}

/// Pre-trains the base denoiser and writes its checkpoint and loss log.
pub fn pretrain_base(config: &RunConfig, run: &RunDir) -> Result<Vec<StepLog>> {
    let dataset = load_dataset(run)?;
    let frozen = Frozen::<f32>::new(config)?;
    let mut log = LogWriter::create(run.path(PRETRAIN_LOG))?;
    let mut io = Ok(());
    let (denoiser, logs) = pretrain(config, &frozen, &dataset, |l| {
        log_progress("pretrain", l, 100);
        if io.is_ok() {
            io = log.line(&l.row());
        }
    })?;
    io?;
    save_denoiser(run, config, &denoiser)?;
    Ok(logs)
}

pub fn save_denoiser(run: &RunDir, config: &RunConfig, denoiser: &Denoiser<f32>) -> Result<()> {
    Checkpoint::new(denoiser.params().clone())
        .with_meta("kind", "denoiser")
        .with_meta("config_hash", config.hash())
        .with_meta("steps", config.pretrain_steps)
        .save(&run.path(BASE_CHECKPOINT))
}

pub fn save_adapter(run: &RunDir, config: &RunConfig, adapter: &AdapterState<f32>) -> Result<()> {
    Checkpoint::new(adapter.params().clone())
        .with_meta("kind", "adapter")
        .with_meta("config_hash", config.hash())
        .with_meta("steps", config.adapter_steps)
        .save(&run.path(ADAPTER_CHECKPOINT))
}

/// Trains the adapter against the frozen base and writes its checkpoint
/// and step log with guidance energies.
pub fn train_adapter_stage(config: &RunConfig, run: &RunDir) -> Result<Vec<StepLog>> {
    let dataset = load_dataset(run)?;
    let denoiser = load_denoiser(run, config)?;
    let frozen = Frozen::<f32>::new(config)?;
    let mut log = LogWriter::create(run.path(ADAPTER_LOG))?;
    let mut io = Ok(());
    let (adapter, logs) = train_adapter(config, &frozen, &denoiser, &dataset, |l| {
        log_progress("adapter", l, 50);
        if io.is_ok() {
            io = log.line(&l.row());
        }
    })?;
    io?;
    save_adapter(run, config, &adapter)?;
    Ok(logs)
}

/// One row of the samples manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    pub background_id: usize,
    pub reference_id: usize,
    pub kind: String,
    pub noise_seed: u64,
    pub image_path: String,
    pub mask_path: String,
    pub energy_initial: f64,
    pub energy_final: f64,
}

impl SampleRecord {
    fn row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.index,
            self.background_id,
            self.reference_id,
            self.kind,
            self.noise_seed,
            self.image_path,
            self.mask_path,
            self.energy_initial,
            self.energy_final
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed samples row {line:?}"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad());
        let real = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(SampleRecord {
            index: num(f[0])? as usize,
            background_id: num(f[1])? as usize,
            reference_id: num(f[2])? as usize,
            kind: f[3].to_string(),
            noise_seed: num(f[4])?,
            image_path: f[5].to_string(),
            mask_path: f[6].to_string(),
            energy_initial: real(f[7])?,
            energy_final: real(f[8])?,
        })
    }
}

fn first_last(energies: &[f64]) -> (f64, f64) {
    match (energies.first(), energies.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (f64::NAN, f64::NAN),
    }
}

/// Generates `config.samples` anomalies on training normals and writes the
/// images, their masks, a manifest and a contact sheet.
pub fn sample_stage(config: &RunConfig, run: &RunDir) -> Result<Vec<SampleRecord>> {
    let dataset = load_dataset(run)?;
    let denoiser = load_denoiser(run, config)?;
    let adapter = adapter_for_sampling(run, config)?;
    let frozen = Frozen::<f32>::new(config)?;
    let plan = plan_synthesis(&dataset, config.samples, config.seed)?;
    let generated = synthesize(
        &frozen,
        &denoiser,
        adapter.as_ref(),
        &sampler_config(config),
        asea_config(config),
        &plan,
    )?;
    let dir = run.samples();
    create_dir(&dir)?;
    let mut records = Vec::with_capacity(plan.len());
    let mut manifest = format!("{SAMPLES_HEADER}\n");
    for (i, (item, g)) in plan.iter().zip(&generated).enumerate() {
        let (energy_initial, energy_final) = first_last(&g.energies);
        let record = SampleRecord {
            index: i,
            background_id: item.background.id,
            reference_id: item.reference.id,
            kind: item.kind.name().to_string(),
            noise_seed: item.noise_seed,
            image_path: format!("{i:05}.png"),
            mask_path: format!("{i:05}_mask.png"),
            energy_initial,
            energy_final,
        };
        g.image.clamped().save_png(&dir.join(&record.image_path))?;
        item.mask.save_png(&dir.join(&record.mask_path))?;
        let _ = writeln!(manifest, "{}", record.row());
        records.push(record);
    }
    write_file(&dir.join(crate::data::MANIFEST), &manifest)?;
    let rows: Vec<Vec<Image>> = plan
        .iter()
        .zip(&generated)
        .take(SHEET_ROWS)
        .map(|(item, g)| {
            vec![
                item.background.image.clone(),
                mask_image(&item.mask),
                g.image.clamped(),
                item.reference.image.clone(),
            ]
        })
        .collect();
    if !rows.is_empty() {
        contact_sheet(&rows)?.save_png(&dir.join(CONTACT_SHEET))?;
    }
    Ok(records)
}

/// A sample set read back from disk.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub records: Vec<SampleRecord>,
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
}

pub fn load_samples(run: &RunDir) -> Result<SampleSet> {
    let dir = run.samples();
    let path = dir.join(crate::data::MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SAMPLES_HEADER) {
        return Err(Error::Format(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let records = lines.map(SampleRecord::parse).collect::<Result<Vec<_>>>()?;
    let images = records
        .iter()
        .map(|r| Image::load_png(&dir.join(&r.image_path)))
        .collect::<Result<_>>()?;
    let masks = records
        .iter()
        .map(|r| Mask::load_png(&dir.join(&r.mask_path)))
        .collect::<Result<_>>()?;
    Ok(SampleSet {
        records,
        images,
        masks,
    })
}

/// The synthesis plan the sample set was generated from, checked against
/// the manifest so metrics never pair images with the wrong sources.
fn matching_plan<'a>(
    dataset: &'a Dataset,
    config: &RunConfig,
    set: &SampleSet,
) -> Result<Vec<SynthesisItem<'a>>> {
    let plan = plan_synthesis(dataset, set.records.len(), config.seed)?;
    for (item, r) in plan.iter().zip(&set.records) {
        if item.background.id != r.background_id
            || item.reference.id != r.reference_id
            || item.noise_seed != r.noise_seed
        {
            return Err(Error::Protocol(format!(
                "sample {} does not match the synthesis plan of this configuration",
                r.index
            )));
        }
    }
    Ok(plan)
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Mean localization ratio of generated images against their backgrounds.
pub fn mean_localization(plan: &[SynthesisItem], images: &[Image]) -> Result<f64> {
    let ratios = plan
        .iter()
        .zip(images)
        .map(|(item, img)| Ok(localization_ratio(img, &item.background.image, &item.mask)?.ratio))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(ratios))
}

/// Diversity proxy: mean over defect kinds of the pairwise distance between
/// the denoiser's bottleneck features of the images generated for that kind.
pub fn diversity(
    frozen: &Frozen<f32>,
    denoiser: &Denoiser<f32>,
    plan: &[SynthesisItem],
    images: &[Image],
) -> Result<f64> {
    let mut per_kind = Vec::new();
    let mut kinds: Vec<_> = plan.iter().map(|p| p.kind).collect();
    kinds.sort_by_key(|k| k.name());
    kinds.dedup();
    for kind in kinds {
        let members: Vec<(&SynthesisItem, &Image)> = plan
            .iter()
            .zip(images)
            .filter(|(p, _)| p.kind == kind)
            .collect();
        if members.len() < 2 {
            continue;
        }
        let latents = members
            .iter()
            .map(|(_, img)| codec::encode::<f32>(img, frozen.latent))
            .collect::<Result<Vec<_>>>()?;
        let cond = members
            .iter()
            .map(|(p, _)| {
                Ok(Conditioning {
                    text: frozen.text_embedding(&crate::data::target_caption(
                        p.background.texture,
                        Some(kind.name()),
                    ))?,
                    feature: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let steps = vec![FEATURE_TIMESTEP; latents.len()];
        let (_, mid) = denoiser.predict_with_mid(&latents, &steps, &cond, None)?;
        let features: Vec<Vec<f64>> = mid
            .into_iter()
            .map(|m| m.into_iter().map(f64::from).collect())
            .collect();
        per_kind.push(diversity_proxy(&features)?);
    }
    if per_kind.is_empty() {
        return Err(Error::Contract(
            "diversity needs two samples of one defect kind".into(),
        ));
    }
    Ok(mean(per_kind))
}

/// One row of the ablation sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub asea_steps: usize,
    pub gamma: f64,
    pub localization: f64,
    pub energy_initial: f64,
    pub energy_final: f64,
    pub diversity: f64,
}

impl SweepRow {
    fn row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.asea_steps,
            self.gamma,
            self.localization,
            self.energy_initial,
            self.energy_final,
            self.diversity
        )
    }
}

/// Report key of the sweep's localization at one grid point.
pub fn sweep_metric(asea_steps: usize, gamma: f64) -> String {
    format!("sweep_localization_steps{asea_steps}_gamma{gamma}")
}

/// Regenerates `plan` at every guidance-step count and blend weight.
/// With γ = 0 the adapter branch contributes nothing, so those rows share
/// one base-model generation; their energies still come from the guidance
/// loop at the row's step count.
pub fn sweep(
    config: &RunConfig,
    frozen: &Frozen<f32>,
    denoiser: &Denoiser<f32>,
    adapter: &AdapterState<f32>,
    plan: &[SynthesisItem],
) -> Result<Vec<SweepRow>> {
    let sampler = sampler_config(config);
    let base = synthesize(frozen, denoiser, None, &sampler, asea_config(config), plan)?;
    let mut rows = Vec::new();
    for gamma in SWEEP_GAMMAS {
        for steps in SWEEP_STEPS {
            let asea = AseaConfig {
                steps,
                ..asea_config(config)
            };
            let (images, energies): (Vec<Image>, Vec<Vec<f64>>) = if gamma == 0.0 {
                let energies = plan
                    .iter()
                    .map(|p| {
                        let caption = p.request()?.reference.map(|(_, c)| c).unwrap_or_default();
                        let (_, outcome) = frozen.guided_feature(
                            &p.reference.image,
                            &caption,
                            &p.mask,
                            asea,
                            None,
                        )?;
                        Ok(outcome.energies)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (base.iter().map(|g| g.image.clamped()).collect(), energies)
            } else {
                let mut scaled = adapter.clone();
                scaled.gamma = gamma;
                let out = synthesize(frozen, denoiser, Some(&scaled), &sampler, asea, plan)?;
                unzip_generated(out)
            };
            rows.push(SweepRow {
                asea_steps: steps,
                gamma,
                localization: mean_localization(plan, &images)?,
                energy_initial: mean(energies.iter().map(|e| first_last(e).0)),
                energy_final: mean(energies.iter().map(|e| first_last(e).1)),
                diversity: diversity(frozen, denoiser, plan, &images)?,
            });
            info!(
                "sweep T_g {steps} gamma {gamma}: localization {:.4}",
                rows.last().expect("row").localization
            );
        }
    }
    Ok(rows)
}

fn unzip_generated(out: Vec<Generated>) -> (Vec<Image>, Vec<Vec<f64>>) {
    out.into_iter()
        .map(|g| (g.image.clamped(), g.energies))
        .unzip()
}

fn segmenter_setup(config: &RunConfig) -> Result<(SegmenterConfig, SegmenterTraining)> {
    Ok((
        SegmenterConfig::new(config.image_size, config.segmenter_width)?,
        SegmenterTraining {
            steps: config.segmenter_steps,
            batch_size: config.batch_size,
            learning_rate: config.segmenter_learning_rate,
            weight_decay: config.weight_decay,
        },
    ))
}

/// Downstream scores of a segmenter trained on `synthetic` plus the
/// training normals, tested on the held-out split.
pub fn downstream(
    config: &RunConfig,
    dataset: &Dataset,
    synthetic: Vec<LabeledImage>,
) -> Result<DownstreamScores> {
    let (seg, training) = segmenter_setup(config)?;
    let mut train = synthetic;
    train.extend(labeled_split(dataset, Split::Train, true));
    let test = labeled_split(dataset, Split::Test, false);
    downstream_protocol(&train, &test, seg, training, config.seed, Overlap::Reject)
}

/// Scores the sample set on disk and writes the metric report, plus the
/// ablation sweep when enabled.
pub fn eval_stage(config: &RunConfig, run: &RunDir) -> Result<MetricReport> {
    let dataset = load_dataset(run)?;
    let set = load_samples(run)?;
    if set.records.is_empty() {
        return Err(Error::Protocol(
            "the sample set is empty; run sample first".into(),
        ));
    }
    let denoiser = load_denoiser(run, config)?;
    let frozen = Frozen::<f32>::new(config)?;
    let plan = matching_plan(&dataset, config, &set)?;
    let n = set.records.len();
    let seeds = [config.seed];
    let mut report = MetricReport::new(config.hash());

    report.push(
        "localization_ratio",
        mean_localization(&plan, &set.images)?,
        n,
        &seeds,
    );
    let energies: Vec<&SampleRecord> = set
        .records
        .iter()
        .filter(|r| r.energy_initial.is_finite())
        .collect();
    if !energies.is_empty() {
        report.push(
            "energy_initial",
            mean(energies.iter().map(|r| r.energy_initial)),
            energies.len(),
            &seeds,
        );
        report.push(
            "energy_final",
            mean(energies.iter().map(|r| r.energy_final)),
            energies.len(),
            &seeds,
        );
    }
    report.push(
        "diversity_proxy",
        diversity(&frozen, &denoiser, &plan, &set.images)?,
        n,
        &seeds,
    );

    let synthetic: Vec<LabeledImage> = plan
        .iter()
        .zip(set.images.iter().zip(&set.masks))
        .map(|(item, (image, mask))| LabeledImage {
            origins: item.origins(),
            image: image.clone(),
            mask: mask.clone(),
        })
        .collect();
    let test_count = dataset.split(Split::Test).count();
    let synth = downstream(config, &dataset, synthetic)?;
    report.push("pixel_auroc", synth.pixel_auroc, test_count, &seeds);
    report.push("image_auroc", synth.image_auroc, test_count, &seeds);
    let control = downstream(config, &dataset, labeled_crop_paste(&plan, config.seed)?)?;
    report.push(
        "crop_paste_pixel_auroc",
        control.pixel_auroc,
        test_count,
        &seeds,
    );
    report.push(
        "crop_paste_image_auroc",
        control.image_auroc,
        test_count,
        &seeds,
    );

    if config.eval_sweep {
        let adapter = load_adapter(run, config)?.ok_or_else(|| {
            Error::Config(format!(
                "the sweep needs {}",
                run.path(ADAPTER_CHECKPOINT).display()
            ))
        })?;
        let count = config.sweep_samples.min(plan.len());
        let rows = sweep(config, &frozen, &denoiser, &adapter, &plan[..count])?;
        let mut text = format!("{SWEEP_HEADER}\n");
        for r in &rows {
            let _ = writeln!(text, "{}", r.row());
            report.push(
                sweep_metric(r.asea_steps, r.gamma),
                r.localization,
                count,
                &seeds,
            );
        }
        write_file(&run.path(SWEEP), &text)?;
    }

    write_file(&run.path(REPORT), &report.to_text())?;
    write_file(&run.path(REPORT_TSV), &report.to_tsv())?;
    Ok(report)
}
