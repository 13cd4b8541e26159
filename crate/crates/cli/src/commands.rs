//! Subcommand implementations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use simclr_s2_core::autodiff::OptimizerConfig;
use simclr_s2_core::contrastive::{self, format_sig9, pretrain_log_csv, ContrastiveConfig, EpochRecord};
use simclr_s2_core::eval::{
    confusion_metrics, emit_report, metrics_csv, predictions_csv, recall_by_region, top_k_confident, Prediction,
    ReportFormat, StudyMetric, StudyRow, StudyTable, OVERALL_REGION,
};
use simclr_s2_core::model::{load_checkpoint, Checkpoint, EncoderConfig, InputShape, DEFAULT_PROJ_DIM};
use simclr_s2_core::raster::{
    band_stats_of_chips, generate_synthetic_dataset, load_chip, BandStats, DatasetManifest, Label, ManifestEntry,
    MultispectralChip, Split, SynthParams,
};
use simclr_s2_core::train::{
    distill, finetune, irrigated_probabilities, make_splits_with_holdout, train_log_csv, train_supervised,
    DistillConfig, FinetuneConfig, Init, LabeledChip, StudentSpec, TrainConfig, DEFAULT_HOLDOUT_FRACTION,
};

use crate::args::*;
use crate::artifacts::Artifacts;
use crate::config::{pick, RunConfig, StageSection};
use crate::error::invalid;

pub const DEFAULT_ENCODER: &str = "tiny";
pub const DEFAULT_FRACTION: f64 = 0.01;
pub const DEFAULT_K: usize = 100;
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.99;

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    artifacts: Artifacts,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let seed = pick(cli.seed, cfg.seed, 0);
    let mut ctx = Ctx { artifacts: Artifacts::new(&out), cfg, seed, out };
    match cli.command {
        Command::Synth(a) => synth(&mut ctx, a)?,
        Command::Stats(a) => stats(&mut ctx, a)?,
        Command::Split(a) => split(&mut ctx, a)?,
        Command::Pretrain(a) => pretrain(&mut ctx, a)?,
        Command::Finetune(a) => finetune_cmd(&mut ctx, a)?,
        Command::Distill(a) => distill_cmd(&mut ctx, a)?,
        Command::TrainSupervised(a) => supervised(&mut ctx, a)?,
        Command::Evaluate(a) => evaluate(&mut ctx, a)?,
        Command::Predict(a) => predict(&mut ctx, a)?,
        Command::StudyPrecision(a) => study_precision(&mut ctx, a)?,
        Command::StudyRecall(a) => study_recall(&mut ctx, a)?,
        Command::Report(a) => report(&mut ctx, a)?,
    }
    ctx.artifacts.finish()
}

/// A manifest together with the directory its relative paths resolve from.
struct Dataset {
    manifest: DatasetManifest,
    root: PathBuf,
}

impl Dataset {
    fn load(ctx: &Ctx, flag: &ManifestArg) -> anyhow::Result<Self> {
        let path = flag
            .manifest
            .clone()
            .or_else(|| ctx.cfg.data.manifest.clone())
            .ok_or_else(|| invalid("no manifest: pass --manifest or set data.manifest"))?;
        let manifest = DatasetManifest::load(&path).with_context(|| format!("loading {}", path.display()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { manifest, root })
    }

    fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    fn chips(&self, entries: &[&ManifestEntry]) -> anyhow::Result<Vec<MultispectralChip>> {
        entries
            .iter()
            .map(|e| load_chip(&self.resolve(e)).with_context(|| format!("loading chip {}", e.path)))
            .collect()
    }

    fn select(&self, keep: impl Fn(&ManifestEntry) -> bool) -> Vec<&ManifestEntry> {
        self.manifest.entries.iter().filter(|e| keep(e)).collect()
    }

    /// Unlabeled-pool records: split `unlabeled_pool` or no label.
    fn pool(&self) -> Vec<&ManifestEntry> {
        self.select(|e| e.split == Some(Split::UnlabeledPool) || e.label.is_none())
    }

    /// Labeled records of `split`, or every labeled record when the
    /// manifest has no such split.
    fn labeled_in(&self, split: Split) -> Vec<&ManifestEntry> {
        let tagged = self.select(|e| e.label.is_some() && e.split == Some(split));
        if tagged.is_empty() {
            self.select(|e| e.label.is_some() && e.split.is_none())
        } else {
            tagged
        }
    }

    fn labeled_chips(&self, split: Split) -> anyhow::Result<Vec<LabeledChip>> {
        let entries = self.labeled_in(split);
        if entries.is_empty() {
            return Err(invalid("manifest has no labeled records"));
        }
        let chips = self.chips(&entries)?;
        Ok(chips.into_iter().zip(&entries).map(|(chip, e)| LabeledChip { chip, label: e.label.unwrap() }).collect())
    }
}

fn encoder_for(name: &str, chip: &MultispectralChip) -> anyhow::Result<EncoderConfig> {
    let input = InputShape { height: chip.height(), width: chip.width(), bands: chip.bands().len() };
    Ok(EncoderConfig::zoo(name, input)?)
}

fn train_config(
    stage: &StageArgs,
    file: &StageSection,
    seed: u64,
    defaults: TrainConfig,
) -> anyhow::Result<TrainConfig> {
    let lr = pick(stage.lr, file.lr, defaults.optimizer.base_lr());
    let name = pick(stage.optimizer.clone(), file.optimizer.clone(), defaults.optimizer.name().to_string());
    let optimizer = OptimizerConfig::from_name(&name, lr)
        .ok_or_else(|| invalid(format!("unknown optimizer `{name}` (adam, sgd_cosine)")))?;
    let config = TrainConfig {
        epochs: pick(stage.epochs, file.epochs, defaults.epochs),
        batch_size: pick(stage.batch_size, file.batch_size, defaults.batch_size),
        optimizer,
        seed,
    };
    config.validate()?;
    Ok(config)
}

fn progress(stage: &'static str) -> impl FnMut(&EpochRecord) {
    move |r| eprintln!("stage={stage} epoch={} loss={}", r.epoch, format_sig9(r.loss))
}

fn load_ckpt(path: &Path) -> anyhow::Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn synth(ctx: &mut Ctx, a: SynthArgs) -> anyhow::Result<()> {
    let s = &ctx.cfg.synth;
    let mut params = SynthParams::new(
        ctx.seed,
        pick(a.unlabeled, s.unlabeled, 2000),
        pick(a.labeled, s.labeled, 400),
        pick(a.size, s.size, 32),
        pick(a.class_signal, s.class_signal, 0.6),
    );
    params.regions = pick(a.regions, s.regions.clone(), Vec::new());
    let manifest = generate_synthetic_dataset(&ctx.out, &params)?;
    for e in &manifest.entries {
        ctx.artifacts.record(&e.path)?;
    }
    ctx.artifacts.record("manifest.tsv")?;
    eprintln!("stage=synth records={}", manifest.len());
    println!("digest={}", ctx.artifacts.combined_digest());
    Ok(())
}

fn stats(ctx: &mut Ctx, a: StatsArgs) -> anyhow::Result<()> {
    let data = Dataset::load(ctx, &a.data)?;
    let mut entries = data.pool();
    if entries.is_empty() {
        entries = data.manifest.entries.iter().collect();
    }
    let chips = data.chips(&entries)?;
    let stats = band_stats_of_chips(&chips)?;
    ctx.artifacts.write("band_stats.tsv", stats.to_text().as_bytes())?;
    eprintln!("stage=stats chips={}", chips.len());
    Ok(())
}

/// The entry's chip path rewritten relative to `out`, so the new manifest
/// resolves from where it is written.
fn rebase(data: &Dataset, entry: &ManifestEntry, out: &Path) -> anyhow::Result<String> {
    let chip = std::path::absolute(data.resolve(entry))?;
    let out = std::path::absolute(out)?;
    let relative = pathdiff::diff_paths(&chip, &out).unwrap_or(chip);
    Ok(relative.to_string_lossy().into_owned())
}

fn split(ctx: &mut Ctx, a: SplitArgs) -> anyhow::Result<()> {
    let data = Dataset::load(ctx, &a.data)?;
    let fraction = pick(a.fraction, ctx.cfg.split.fraction, DEFAULT_FRACTION);
    let holdout = pick(a.holdout_fraction, ctx.cfg.split.holdout_fraction, DEFAULT_HOLDOUT_FRACTION);
    let plan = make_splits_with_holdout(&data.manifest, fraction, holdout, ctx.seed)?;
    for (name, part) in
        [("train.tsv", plan.train_manifest(&data.manifest)), ("holdout.tsv", plan.holdout_manifest(&data.manifest))]
    {
        let mut entries = Vec::with_capacity(part.len());
        for mut e in part.entries {
            e.path = rebase(&data, &e, &ctx.out)?;
            entries.push(e);
        }
        ctx.artifacts.write(name, DatasetManifest::new(entries)?.to_text().as_bytes())?;
    }
    eprintln!("stage=split train={} holdout={}", plan.size(), plan.holdout.len());
    println!("train={} holdout={}", plan.size(), plan.holdout.len());
    Ok(())
}

fn stats_file(path: Option<PathBuf>) -> anyhow::Result<Option<BandStats>> {
    path.map(|p| {
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        BandStats::parse(&text).with_context(|| format!("parsing {}", p.display()))
    })
    .transpose()
}

fn pretrain(ctx: &mut Ctx, a: PretrainArgs) -> anyhow::Result<()> {
    let data = Dataset::load(ctx, &a.data)?;
    let pool = data.chips(&data.pool())?;
    let first = pool.first().ok_or_else(|| invalid("manifest has no unlabeled records"))?;
    let file = &ctx.cfg.pretrain;
    let encoder = encoder_for(&pick(a.encoder, ctx.cfg.encoder.clone(), DEFAULT_ENCODER.into()), first)?;
    let stats = match stats_file(a.stats.or_else(|| ctx.cfg.data.stats.clone()))? {
        Some(s) => s,
        None => band_stats_of_chips(&pool)?,
    };
    let defaults = ContrastiveConfig::default();
    let stage = train_config(
        &a.stage,
        &file.stage(),
        ctx.seed,
        TrainConfig {
            epochs: defaults.epochs,
            batch_size: defaults.batch_size,
            optimizer: defaults.optimizer,
            seed: ctx.seed,
        },
    )?;
    let config = ContrastiveConfig {
        temperature: pick(a.temperature, file.temperature, defaults.temperature),
        batch_size: stage.batch_size,
        epochs: stage.epochs,
        optimizer: stage.optimizer,
        seed: ctx.seed,
    };
    let proj_dim = pick(a.proj_dim, file.proj_dim, DEFAULT_PROJ_DIM);
    let out = contrastive::pretrain(&pool, &stats, &encoder, proj_dim, &config, &mut progress("pretrain"))?;
    ctx.artifacts.write("pretrain.ckpt", out.checkpoint.to_bytes())?;
    ctx.artifacts.write("pretrain_loss.csv", pretrain_log_csv(&out.log).as_bytes())?;
    println!("checkpoint={} id={}", ctx.out.join("pretrain.ckpt").display(), out.checkpoint.id());
    Ok(())
}

fn finetune_cmd(ctx: &mut Ctx, a: FinetuneArgs) -> anyhow::Result<()> {
    let data = Dataset::load(ctx, &a.data)?;
    let pretrained = load_ckpt(&a.checkpoint)?;
    let train = data.labeled_chips(Split::Train)?;
    let file = &ctx.cfg.finetune;
    let defaults = FinetuneConfig::default();
    let config = FinetuneConfig {
        freeze_encoder: if a.unfreeze { false } else { file.freeze_encoder.unwrap_or(defaults.freeze_encoder) },
        expected_encoder: None,
        train: train_config(&a.stage, &file.stage(), ctx.seed, defaults.train)?,
    };
    let out = finetune(&pretrained, &train, &config, &mut progress("finetune"))?;
    ctx.artifacts.write("finetune.ckpt", out.checkpoint.to_bytes())?;
    ctx.artifacts.write("finetune_loss.csv", train_log_csv(&out.log).as_bytes())?;
    println!("checkpoint={} id={}", ctx.out.join("finetune.ckpt").display(), out.checkpoint.id());
    Ok(())
}

fn distill_cmd(ctx: &mut Ctx, a: DistillArgs) -> anyhow::Result<()> {
    let data = Dataset::load(ctx, &a.data)?;
    let teacher = load_ckpt(&a.teacher)?;
    let pool = data.chips(&data.pool())?;
    let file = &ctx.cfg.distill;
    let defaults = DistillConfig::default();
    let student = match pick(a.student, file.student.clone(), "same".into()).as_str() {
        "same" => StudentSpec::SameAsTeacher,
        name => StudentSpec::Smaller(EncoderConfig::zoo(name, teacher.config().input)?),
    };
    let config = DistillConfig {
        temperature: pick(a.temperature, file.temperature, defaults.temperature),
        student,
        train: train_config(&a.stage, &file.stage(), ctx.seed, defaults.train)?,
    };
    let out = distill(&teacher, &pool, &config, &mut progress("distill"))?;
    ctx.artifacts.write("distill.ckpt", out.checkpoint.to_bytes())?;
    ctx.artifacts.write("distill_loss.csv", train_log_csv(&out.log).as_bytes())?;
    println!("checkpoint={} id={}", ctx.out.join("distill.ckpt").display(), out.checkpoint.id());
    Ok(())
}

fn supervised(ctx: &mut Ctx, a: SupervisedArgs) -> anyhow::Result<()> {
    let data = Dataset::load(ctx, &a.data)?;
    let train = data.labeled_chips(Split::Train)?;
    let encoder = encoder_for(&pick(a.encoder, ctx.cfg.encoder.clone(), DEFAULT_ENCODER.into()), &train[0].chip)?;
    let stats = match stats_file(a.stats.or_else(|| ctx.cfg.data.stats.clone()))? {
        Some(s) => s,
        None => band_stats_of_chips(train.iter().map(|s| &s.chip))?,
    };
    let init = match &a.warm_start {
        Some(path) => Init::WarmStart(load_ckpt(path)?),
        None => Init::Scratch,
    };
    let config = train_config(&a.stage, &ctx.cfg.supervised, ctx.seed, TrainConfig::default())?;
    let out = train_supervised(&train, &stats, &encoder, &init, &config, &mut progress("supervised"))?;
    ctx.artifacts.write("supervised.ckpt", out.checkpoint.to_bytes())?;
    ctx.artifacts.write("supervised_loss.csv", train_log_csv(&out.log).as_bytes())?;
    println!("checkpoint={} id={}", ctx.out.join("supervised.ckpt").display(), out.checkpoint.id());
    Ok(())
}

/// Predictions for `entries`, keyed by manifest path.
fn predictions(ckpt: &Checkpoint, data: &Dataset, entries: &[&ManifestEntry]) -> anyhow::Result<Vec<Prediction>> {
    let chips = data.chips(entries)?;
    let refs: Vec<&MultispectralChip> = chips.iter().collect();
    let probs = irrigated_probabilities(ckpt.network(), &refs)?;
    entries
        .iter()
        .zip(probs)
        .map(|(e, p)| {
            let pred = Prediction::new(e.path.clone(), p.clamp(0.0, 1.0))?;
            Ok(match &e.region {
                Some(r) => pred.with_region(r.clone()),
                None => pred,
            })
        })
        .collect()
}

fn evaluate(ctx: &mut Ctx, a: EvaluateArgs) -> anyhow::Result<()> {
    let data = Dataset::load(ctx, &a.data)?;
    let ckpt = load_ckpt(&a.checkpoint)?;
    let entries = data.labeled_in(Split::Holdout);
    if entries.is_empty() {
        return Err(invalid("manifest has no labeled records"));
    }
    let preds = predictions(&ckpt, &data, &entries)?;
    let labels: Vec<Label> = entries.iter().map(|e| e.label.unwrap()).collect();
    let mut report = confusion_metrics(&preds, &labels)?;
    report.metadata.model_id = Some(ckpt.id());
    report.metadata.split_size = Some(entries.len());
    if entries.iter().all(|e| e.region.is_some()) {
        let positives: Vec<Prediction> =
            preds.iter().zip(&labels).filter(|(_, l)| l.is_irrigated()).map(|(p, _)| p.clone()).collect();
        if !positives.is_empty() {
            report.regions = recall_by_region(&positives)?;
        }
    }
    let name = format!("metrics_{}.csv", stem(&a.checkpoint));
    ctx.artifacts.write(&name, metrics_csv(&report).as_bytes())?;
    println!("precision={} recall={} f1={} n={}", report.precision, report.recall, report.f1, entries.len());
    Ok(())
}

fn predict(ctx: &mut Ctx, a: PredictArgs) -> anyhow::Result<()> {
    let data = Dataset::load(ctx, &a.data)?;
    let ckpt = load_ckpt(&a.checkpoint)?;
    let entries: Vec<&ManifestEntry> = data.manifest.entries.iter().collect();
    let preds = predictions(&ckpt, &data, &entries)?;
    let name = format!("predictions_{}.csv", stem(&a.checkpoint));
    ctx.artifacts.write(&name, predictions_csv(&preds).as_bytes())?;
    eprintln!("stage=predict records={}", preds.len());
    Ok(())
}

struct Pair {
    size: usize,
    models: [PathBuf; 2],
}

fn parse_pair(s: &str) -> anyhow::Result<Pair> {
    let bad = || invalid(format!("bad --pair `{s}`; expected SIZE=SELF_SUPERVISED.ckpt,SUPERVISED.ckpt"));
    let (size, rest) = s.split_once('=').ok_or_else(bad)?;
    let (a, b) = rest.split_once(',').ok_or_else(bad)?;
    Ok(Pair { size: size.trim().parse().map_err(|_| bad())?, models: [PathBuf::from(a), PathBuf::from(b)] })
}

fn write_study(ctx: &mut Ctx, name: &str, table: &StudyTable) -> anyhow::Result<()> {
    ctx.artifacts.write(&format!("{name}.csv"), &emit_report(table, ReportFormat::Csv)?)?;
    let md = emit_report(table, ReportFormat::Markdown)?;
    ctx.artifacts.write(&format!("{name}.md"), &md)?;
    print!("{}", String::from_utf8_lossy(&md));
    Ok(())
}

fn study_precision(ctx: &mut Ctx, a: StudyPrecisionArgs) -> anyhow::Result<()> {
    let data = Dataset::load(ctx, &a.data)?;
    let k = pick(a.k, ctx.cfg.study.k, DEFAULT_K);
    let min = pick(a.min_confidence, ctx.cfg.study.min_confidence, DEFAULT_MIN_CONFIDENCE);
    let entries = data.labeled_in(Split::Holdout);
    if entries.is_empty() {
        return Err(invalid("manifest has no labeled records"));
    }
    let truth: HashMap<&str, Label> = entries.iter().map(|e| (e.path.as_str(), e.label.unwrap())).collect();
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for pair in a.pairs.iter().map(|p| parse_pair(p)) {
        let pair = pair?;
        let mut values = [0.0; 2];
        for (slot, path) in pair.models.iter().enumerate() {
            let preds = predictions(&load_ckpt(path)?, &data, &entries)?;
            let top = top_k_confident(&preds, k, min)?;
            let picked: Vec<&Prediction> = preds.iter().filter(|p| top.ids.contains(&p.id)).collect();
            let labels: Vec<Label> = picked.iter().map(|p| truth[p.id.as_str()]).collect();
            let owned: Vec<Prediction> = picked.into_iter().cloned().collect();
            values[slot] = confusion_metrics(&owned, &labels)?.precision;
            notes.push(format!(
                "{}: threshold {} for {}{}",
                file_name(path),
                format_sig9(top.effective_threshold),
                pair.size,
                if top.below_requested { " (below requested minimum)" } else { "" }
            ));
        }
        rows.push(StudyRow {
            region: None,
            training_size: pair.size,
            self_supervised: values[0],
            supervised: values[1],
        });
    }
    let note = format!("Top {k} predictions, requested minimum confidence {min}.\n{}", notes.join("\n"));
    write_study(ctx, "study_precision", &StudyTable { metric: StudyMetric::Precision, rows, note: Some(note) })
}

fn study_recall(ctx: &mut Ctx, a: StudyRecallArgs) -> anyhow::Result<()> {
    let data = Dataset::load(ctx, &a.data)?;
    let entries: Vec<&ManifestEntry> =
        data.labeled_in(Split::Holdout).into_iter().filter(|e| e.label == Some(Label::Irrigated)).collect();
    if entries.is_empty() {
        return Err(invalid("manifest has no irrigated records"));
    }
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for pair in a.pairs.iter().map(|p| parse_pair(p)) {
        let pair = pair?;
        let mut per_model = Vec::new();
        for path in &pair.models {
            let regions = recall_by_region(&predictions(&load_ckpt(path)?, &data, &entries)?)?;
            let overall = regions.last().map(|r| r.recall).unwrap_or_default();
            notes.push(format!("{}: overall recall {} for {}", file_name(path), format_sig9(overall), pair.size));
            per_model.push(regions);
        }
        for (s, u) in per_model[0].iter().zip(&per_model[1]).filter(|(s, _)| s.region != OVERALL_REGION) {
            rows.push(StudyRow {
                region: Some(s.region.clone()),
                training_size: pair.size,
                self_supervised: s.recall,
                supervised: u.recall,
            });
        }
    }
    write_study(ctx, "study_recall", &StudyTable { metric: StudyMetric::Recall, rows, note: Some(notes.join("\n")) })
}

/// Reads a study table CSV in the layout [`emit_report`] writes.
pub fn parse_study_csv(text: &str) -> anyhow::Result<StudyTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let regional = header.first().map(String::as_str) == Some("country");
    let offset = usize::from(regional);
    if header.len() != 3 + offset || header[offset] != "training_size" {
        return Err(invalid(format!("unrecognized study table header {header:?}")));
    }
    let metric = match header[offset + 1].as_str() {
        "precision_self_supervised" => StudyMetric::Precision,
        "recall_self_supervised" => StudyMetric::Recall,
        other => return Err(invalid(format!("unrecognized metric column `{other}`"))),
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let number = |i: usize| -> anyhow::Result<f64> {
            record[i].trim().parse().map_err(|_| invalid(format!("bad number `{}` in study table", &record[i])))
        };
        rows.push(StudyRow {
            region: regional.then(|| record[0].to_string()),
            training_size: record[offset]
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad size `{}`", &record[offset])))?,
            self_supervised: number(offset + 1)?,
            supervised: number(offset + 2)?,
        });
    }
    Ok(StudyTable { metric, rows, note: None })
}

fn report(ctx: &mut Ctx, a: ReportArgs) -> anyhow::Result<()> {
    let format: ReportFormat = a.format.parse().map_err(invalid)?;
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut table = parse_study_csv(&text)?;
    table.note = a.note;
    let bytes = emit_report(&table, format)?;
    match &a.output {
        Some(name) => {
            ctx.artifacts.write(name, &bytes)?;
        }
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}
