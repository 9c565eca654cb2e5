use std::path::Path;

use anyhow::{ensure, Context};
use dslab_core::align::{
    ablate_sft, alignment_data, answer_items, sft_data, train_stage, Ablation, AblationRow, MultimodalModel,
    StagePolicy, ANSWER_TOKENS,
};
use dslab_core::bench::{build_benchmark, score_answers, BenchConfig, BenchmarkStats, QaItem, Response, ScoreReport, Task};
use dslab_core::encoder::{ratio_grid, ratio_search, train_encoder, zero_shot_accuracy, Encoder, LossCurve};
use dslab_core::grammar::ZERO_SHOT_PROMPT;
use dslab_core::io::{read_jsonl, write_atomic, write_jsonl};
use dslab_core::pairs::{apply_sampling, build_pairs, synth_instructions, CaptionSource, InstructionSample, PairRecord, TrainingPair};
use dslab_core::rng::derive_seed;
use dslab_core::scene::{generate_scenes, read_scene, write_scene, SceneRecord};
use dslab_core::vocab::Vocab;
use dslab_tensor::ModelCheckpoint;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::layout::{require, Layout, SPLITS};

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub layout: Layout,
    pub threads: usize,
}

impl Ctx {
    fn vocab(&self) -> Vocab {
        Vocab::from_config(&self.cfg.scenes)
    }

    /// Writes `config.json` next to a stage's outputs.
    fn stamp(&self, stage_dir: &Path) -> anyhow::Result<()> {
        write_atomic(&stage_dir.join("config.json"), &self.cfg.to_json()?)?;
        Ok(())
    }

    fn scenes(&self, split: &str) -> anyhow::Result<Vec<SceneRecord>> {
        let dir = self.layout.scenes(split);
        let index = require(dir.join("index.json"), "gen-scenes")?;
        let ids: Vec<String> = serde_json::from_slice(&std::fs::read(&index)?)
            .with_context(|| format!("invalid scene index {}", index.display()))?;
        ids.iter()
            .map(|id| read_scene(&dir, id).with_context(|| format!("reading scene {id} from {}", dir.display())))
            .collect()
    }

    fn pairs(&self, scenes: &[SceneRecord]) -> anyhow::Result<Vec<TrainingPair>> {
        let records: Vec<PairRecord> = read_jsonl(&require(self.layout.pairs(), "build-pairs")?)?;
        resolve_pairs(&records, scenes)
    }

    fn encoder(&self) -> anyhow::Result<Encoder> {
        let ckpt = read_ckpt(require(self.layout.encoder_ckpt(), "train-encoder")?)?;
        Ok(Encoder::from_checkpoint(&self.cfg.encoder, self.vocab(), &ckpt)?)
    }

    fn model(&self, path: std::path::PathBuf, producer: &'static str) -> anyhow::Result<MultimodalModel> {
        let ckpt = read_ckpt(require(path, producer)?)?;
        Ok(MultimodalModel::from_checkpoint(&self.cfg.encoder, &self.cfg.align, self.vocab(), &ckpt)?)
    }

    fn instructions(&self) -> anyhow::Result<Vec<InstructionSample>> {
        Ok(read_jsonl(&require(self.layout.instructions(), "build-instructions")?)?)
    }

    fn benchmark(&self) -> anyhow::Result<Vec<QaItem>> {
        Ok(read_jsonl(&require(self.layout.benchmark(), "build-bench")?)?)
    }
}

fn read_ckpt(path: std::path::PathBuf) -> anyhow::Result<ModelCheckpoint> {
    ModelCheckpoint::read(&path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn resolve_pairs(records: &[PairRecord], scenes: &[SceneRecord]) -> anyhow::Result<Vec<TrainingPair>> {
    let by_id: std::collections::HashMap<&str, &SceneRecord> =
        scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    records
        .iter()
        .map(|r| {
            let rec = by_id
                .get(r.scene_id.as_str())
                .with_context(|| format!("pair refers to unknown scene {}", r.scene_id))?;
            Ok(r.resolve(rec)?)
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    serde_json::from_slice(&std::fs::read(path)?).with_context(|| format!("invalid JSON in {}", path.display()))
}

fn write_curve(dir: &Path, curve: &LossCurve) -> anyhow::Result<()> {
    write_atomic(&dir.join("train_log.csv"), curve.to_csv().as_bytes())?;
    Ok(())
}

pub fn gen_scenes(ctx: &Ctx) -> anyhow::Result<()> {
    let c = &ctx.cfg;
    for (i, split) in SPLITS.iter().enumerate() {
        let n = [c.train_scenes, c.eval_scenes, c.holdout_scenes][i];
        let scenes = generate_scenes(derive_seed(c.seed, &[i as u64]), n, &c.scenes, ctx.threads)?;
        let dir = ctx.layout.scenes(split);
        for rec in &scenes {
            write_scene(rec, &dir)?;
        }
        let ids: Vec<&str> = scenes.iter().map(|s| s.scene_id.as_str()).collect();
        write_json(&dir.join("index.json"), &ids)?;
    }
    ctx.stamp(&ctx.layout.dir("scenes"))
}

pub fn build_bench(ctx: &Ctx) -> anyhow::Result<()> {
    let scenes = ctx.scenes("eval")?;
    let cfg = BenchConfig::new(ctx.cfg.scenes.scene_vocab.clone(), ctx.cfg.scenes.object_vocab.clone());
    let (items, stats) = build_benchmark(&scenes, &ctx.cfg.quotas(), &cfg, ctx.cfg.seed)?;
    write_jsonl(&ctx.layout.benchmark(), &items)?;
    write_json(&ctx.layout.bench_stats(), &stats)?;
    ctx.stamp(&ctx.layout.dir("bench"))
}

pub fn build_pairs_cmd(ctx: &Ctx, rescore: bool) -> anyhow::Result<()> {
    let scenes = ctx.scenes("train")?;
    let pairs = if rescore {
        let enc = ctx.encoder()?;
        build_pairs(&scenes, &CaptionSource::Scored(&enc))?
    } else {
        build_pairs(&scenes, &CaptionSource::SceneCaption)?
    };
    let sampled = apply_sampling(&pairs, ctx.cfg.encoder.ratio, ctx.cfg.seed)?;
    let records: Vec<PairRecord> = sampled.iter().map(TrainingPair::record).collect();
    write_jsonl(&ctx.layout.pairs(), &records)?;
    ctx.stamp(&ctx.layout.dir("pairs"))
}

pub fn build_instructions(ctx: &Ctx) -> anyhow::Result<()> {
    let scenes = ctx.scenes("train")?;
    let mut samples = Vec::new();
    for rec in &scenes {
        samples.extend(synth_instructions(rec, ctx.cfg.seed)?);
    }
    write_jsonl(&ctx.layout.instructions(), &samples)?;
    ctx.stamp(&ctx.layout.dir("instructions"))
}

pub fn train_encoder_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let scenes = ctx.scenes("train")?;
    let pairs = ctx.pairs(&scenes)?;
    let enc = Encoder::new(&ctx.cfg.encoder, ctx.vocab(), ctx.cfg.seed)?;
    let curve = train_encoder(&enc, &pairs, ctx.cfg.seed)?;
    let dir = ctx.layout.dir("encoder");
    write_atomic(&ctx.layout.encoder_ckpt(), &enc.checkpoint().to_bytes())?;
    write_curve(&dir, &curve)?;
    ctx.stamp(&dir)
}

#[derive(Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub prompt: String,
    pub scenes: usize,
    pub labels: Vec<String>,
    pub accuracy: f64,
    /// Same protocol with the encoder's initial weights.
    pub untrained_accuracy: f64,
}

pub fn eval_zeroshot(ctx: &Ctx) -> anyhow::Result<()> {
    let scenes = ctx.scenes("holdout")?;
    let labels = &ctx.cfg.scenes.scene_vocab;
    let enc = ctx.encoder()?;
    let untrained = Encoder::new(&ctx.cfg.encoder, ctx.vocab(), ctx.cfg.seed)?;
    let report = ZeroShotReport {
        prompt: ZERO_SHOT_PROMPT.into(),
        scenes: scenes.len(),
        labels: labels.clone(),
        accuracy: zero_shot_accuracy(&enc, &scenes, labels)?,
        untrained_accuracy: zero_shot_accuracy(&untrained, &scenes, labels)?,
    };
    write_json(&ctx.layout.zeroshot_report(), &report)?;
    ctx.stamp(&ctx.layout.dir("zeroshot"))
}

pub fn ratio_search_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let train = ctx.scenes("train")?;
    let holdout = ctx.scenes("holdout")?;
    let records: Vec<PairRecord> = read_jsonl(&require(ctx.layout.pairs(), "build-pairs")?)?;
    // every ratio starts from the unsampled pairs
    let fresh: Vec<PairRecord> = records
        .into_iter()
        .map(|r| PairRecord { replaced: false, ..r })
        .collect();
    let pairs = resolve_pairs(&fresh, &train)?;
    let points = ratio_search(
        &ctx.cfg.encoder,
        &ctx.vocab(),
        &pairs,
        &holdout,
        &ctx.cfg.scenes.scene_vocab,
        &ratio_grid(),
        ctx.cfg.seed,
    )?;
    let mut csv = String::from("ratio,zero_shot_top1,final_loss\n");
    for p in &points {
        csv.push_str(&format!("{:.2},{:.6},{:.12}\n", p.ratio, p.accuracy, p.final_loss));
    }
    write_atomic(&ctx.layout.ratio_csv(), csv.as_bytes())?;
    ctx.stamp(&ctx.layout.dir("ratio"))
}

pub fn align(ctx: &Ctx) -> anyhow::Result<()> {
    let scenes = ctx.scenes("train")?;
    let pairs = ctx.pairs(&scenes)?;
    let model = MultimodalModel::new(ctx.encoder()?, &ctx.cfg.align, ctx.cfg.seed)?;
    let data = alignment_data(&model, &pairs)?;
    let curve = train_stage(&model, &StagePolicy::alignment(), &data, ctx.cfg.align.align_epochs, ctx.cfg.seed)?;
    let dir = ctx.layout.dir("align");
    write_atomic(&ctx.layout.aligned_ckpt(), &model.checkpoint().to_bytes())?;
    write_curve(&dir, &curve)?;
    ctx.stamp(&dir)
}

pub fn sft(ctx: &Ctx) -> anyhow::Result<()> {
    let scenes = ctx.scenes("train")?;
    let samples = ctx.instructions()?;
    let model = ctx.model(ctx.layout.aligned_ckpt(), "align")?;
    let data = sft_data(&model, &scenes, &samples)?;
    let curve = train_stage(&model, &StagePolicy::sft(), &data, ctx.cfg.align.sft_epochs, ctx.cfg.seed)?;
    let dir = ctx.layout.dir("sft");
    write_atomic(&ctx.layout.sft_ckpt(), &model.checkpoint().to_bytes())?;
    write_curve(&dir, &curve)?;
    ctx.stamp(&dir)
}

pub fn eval_bench(ctx: &Ctx, responses: Option<&Path>) -> anyhow::Result<()> {
    let items = ctx.benchmark()?;
    let responses: Vec<Response> = match responses {
        Some(path) => {
            ensure!(path.exists(), "responses file {} does not exist", path.display());
            read_jsonl(path)?
        }
        None => {
            let scenes = ctx.scenes("eval")?;
            let model = ctx.model(ctx.layout.sft_ckpt(), "sft")?;
            answer_items(&model, &items, &scenes, ANSWER_TOKENS)?
        }
    };
    let report = score_answers(&items, &responses);
    let dir = ctx.layout.dir("eval");
    write_jsonl(&dir.join("responses.jsonl"), &responses)?;
    write_json(&ctx.layout.eval_report(), &report)?;
    ctx.stamp(&dir)
}

pub fn ablate(ctx: &Ctx, which: Option<Ablation>) -> anyhow::Result<()> {
    let train = ctx.scenes("train")?;
    let eval = ctx.scenes("eval")?;
    let samples = ctx.instructions()?;
    let items = ctx.benchmark()?;
    let base = ctx.model(ctx.layout.aligned_ckpt(), "align")?;
    let data = sft_data(&base, &train, &samples)?;
    let which: Vec<Ablation> = which.map_or(Ablation::ALL.to_vec(), |w| vec![w]);
    let rows = ablate_sft(&base, &data, &items, &eval, &which, ctx.cfg.seed)?;
    write_json(&ctx.layout.ablation_report(), &rows)?;
    ctx.stamp(&ctx.layout.dir("ablation"))
}

#[derive(Serialize, Deserialize)]
pub struct Summary {
    pub benchmark: ScoreReport,
    pub bench_stats: Option<BenchmarkStats>,
    pub zero_shot: Option<ZeroShotReport>,
    pub ablation: Option<Vec<AblationRow>>,
    pub ratio_search_csv: Option<String>,
}

fn optional<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Option<T>> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn markdown(s: &Summary) -> String {
    let mut md = String::from("# Benchmark summary\n\n");
    md.push_str("| Model | Scene Classification | Recognition | Distance Judge | Security | Avg. |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    let cells: Vec<String> = Task::ALL.iter().map(|&t| pct(s.benchmark.get(t).accuracy)).collect();
    md.push_str(&format!("| SFT | {} | {} |\n", cells.join(" | "), pct(s.benchmark.macro_accuracy)));
    md.push_str("\n| Task | Items | Correct | Wrong | Ambiguous | No match | Missing |\n|---|---|---|---|---|---|---|\n");
    for (t, sc) in &s.benchmark.tasks {
        md.push_str(&format!(
            "| {t} | {} | {} | {} | {} | {} | {} |\n",
            sc.total, sc.correct, sc.wrong, sc.ambiguous, sc.no_match, sc.missing
        ));
    }
    if let Some(z) = &s.zero_shot {
        md.push_str(&format!(
            "\nZero-shot scene classification on {} held-out scenes: {}% (untrained {}%).\n",
            z.scenes,
            pct(z.accuracy),
            pct(z.untrained_accuracy)
        ));
    }
    if let Some(rows) = &s.ablation {
        md.push_str("\n| SFT variant | Final loss | Distance Judge |\n|---|---|---|\n");
        for r in rows {
            md.push_str(&format!("| {} | {:.4} | {} |\n", r.ablation.name(), r.final_loss, pct(r.probe_accuracy)));
        }
    }
    if let Some(csv) = &s.ratio_search_csv {
        md.push_str("\nSample-ratio search:\n\n```\n");
        md.push_str(csv);
        md.push_str("```\n");
    }
    md
}

pub fn report(ctx: &Ctx) -> anyhow::Result<()> {
    let l = &ctx.layout;
    let summary = Summary {
        benchmark: read_json(&require(l.eval_report(), "eval-bench")?)?,
        bench_stats: optional(&l.bench_stats())?,
        zero_shot: optional(&l.zeroshot_report())?,
        ablation: optional(&l.ablation_report())?,
        ratio_search_csv: l.ratio_csv().exists().then(|| std::fs::read_to_string(l.ratio_csv())).transpose()?,
    };
    let dir = l.dir("report");
    write_json(&dir.join("summary.json"), &summary)?;
    write_atomic(&dir.join("summary.md"), markdown(&summary).as_bytes())?;
    print!("{}", markdown(&summary));
    ctx.stamp(&dir)
}
