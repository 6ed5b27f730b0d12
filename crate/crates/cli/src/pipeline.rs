//! The work behind each command.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use log::info;

use ocnet_core::checkpoint;
use ocnet_core::retrieval_eval::{
    cmc_map_with, distance_matrix, export_ranking as rank_gallery, ranking_tsv, DistanceMatrix, EvalResult,
    FeatureFile, GalleryRecord, RankingRow,
};
use ocnet_core::train::{StepLosses, Trainer};
use ocnet_core::{Embeddings, ModelConfig, OcNet, ParamStore, Tensor};
use ocnet_data::seeds::{derive_seed, STREAM_AUGMENT, STREAM_INIT, STREAM_SAMPLER};
use ocnet_data::{
    augment, generate_synthetic, load_images, load_reid_directory, GeneratedDataset, OcclusionTag, PkSampler,
    SampleRecord, Split,
};

use crate::config::RunConfig;

pub const CHECKPOINT: &str = "model.ckpt";
pub const LOSS_LOG: &str = "loss_log.tsv";
pub const TRAIN_REPORT: &str = "train_report.txt";
pub const EVAL_REPORT: &str = "eval_report.txt";
pub const ABLATION_TABLE: &str = "ablation.tsv";
pub const QUERY_FEATURES: &str = "query_features.bin";
pub const GALLERY_FEATURES: &str = "gallery_features.bin";

/// Evaluation strata over query occlusion tags.
pub const STRATA: [&str; 4] = ["none", "object", "pi", "occluded"];

fn in_stratum(tag: OcclusionTag, stratum: &str) -> bool {
    match stratum {
        "none" => tag == OcclusionTag::None,
        "object" => tag == OcclusionTag::Object,
        "pi" => tag == OcclusionTag::Pedestrian,
        "occluded" => tag.is_occluded(),
        _ => true,
    }
}

pub fn gen_data(config: &RunConfig) -> Result<GeneratedDataset> {
    let out = generate_synthetic(&config.synthetic(), &config.data_dir)
        .with_context(|| format!("generating into {}", config.data_dir.display()))?;
    config.write_resolved(&config.data_dir)?;
    info!(
        "wrote {} images to {}",
        out.index.samples.len(),
        config.data_dir.display()
    );
    Ok(out)
}

struct LoadedSplit {
    records: Vec<SampleRecord>,
    images: Vec<RgbImage>,
}

fn load_split(config: &RunConfig, split: Split, keep: impl Fn(&SampleRecord) -> bool) -> Result<LoadedSplit> {
    let index = load_reid_directory(&config.data_dir)
        .with_context(|| format!("loading dataset {}", config.data_dir.display()))?;
    let (records, images) = load_images(&config.data_dir, index.split(split).filter(|s| keep(s)))
        .into_iter()
        .unzip();
    let out = LoadedSplit { records, images };
    if out.records.is_empty() {
        bail!("no usable {split} images under {}", config.data_dir.display());
    }
    Ok(out)
}

fn eval_tensor(config: &RunConfig, images: &[RgbImage]) -> Result<Tensor> {
    let aug = config.augment();
    let tensors = images
        .iter()
        .map(|img| Ok(augment(img, &aug, false, 0)?.tensor))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&tensors)?)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub losses: Vec<StepLosses>,
    pub checkpoint: PathBuf,
    pub num_classes: usize,
    /// Mean training-set `cos(f_g, stripe p)` after training, per stripe.
    pub part_cosines: Vec<f64>,
}

fn mean_row_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.dim(0);
    let mut total = 0.0;
    for i in 0..n {
        let (x, y) = (a.row(i), b.row(i));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += dot / ((nx + 1e-12) * (ny + 1e-12));
    }
    total / n as f64
}

pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = load_split(config, Split::Train, |s| s.identity > 0)?;
    let ids: BTreeSet<i64> = data.records.iter().map(|s| s.identity).collect();
    let class_of: BTreeMap<i64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let identities: Vec<i64> = data.records.iter().map(|s| s.identity).collect();

    let model = OcNet::new(config.model(ids.len()))?;
    let model_text = toml::to_string(model.config())?;
    let store = model.init_params(derive_seed(config.seed, STREAM_INIT, 0));
    let mut trainer = Trainer::new(model, store, config.optim(), config.loss_weights())?;
    let mut sampler = PkSampler::new(
        &identities,
        config.batch_p,
        config.batch_k,
        derive_seed(config.seed, STREAM_SAMPLER, 0),
    )?;
    let aug = config.augment();

    fs::create_dir_all(&config.out_dir)?;
    config.write_resolved(&config.out_dir)?;
    let mut log = BufWriter::new(fs::File::create(config.out_dir.join(LOSS_LOG))?);
    writeln!(log, "step\tL_ID\tL_Tri\tL_SL\tL_total")?;
    let mut losses = Vec::with_capacity(config.steps);
    let per_batch = sampler.batch_size() as u64;
    for step in 0..config.steps {
        let batch = sampler.next_batch();
        let tensors = batch
            .iter()
            .enumerate()
            .map(|(i, &idx)| {
                let seed = derive_seed(config.seed, STREAM_AUGMENT, step as u64 * per_batch + i as u64);
                Ok(augment(&data.images[idx], &aug, true, seed)?.tensor)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.iter().map(|&i| class_of[&identities[i]]).collect();
        let s = trainer
            .step(&Tensor::stack(&tensors)?, &labels)
            .context("training aborted")?;
        writeln!(log, "{}\t{}\t{}\t{}\t{}", s.step, s.id, s.tri, s.sl, s.total)?;
        if config.log_every > 0 && (s.step % config.log_every == 0 || s.step == 1) {
            info!(
                "step {} total {:.4} (id {:.4} tri {:.4} sl {:.4})",
                s.step, s.total, s.id, s.tri, s.sl
            );
        }
        losses.push(s);
    }
    log.flush()?;

    let ckpt = config.out_dir.join(CHECKPOINT);
    checkpoint::save(&ckpt, &model_text, trainer.store())?;

    let emb = trainer.model().embed(
        trainer.store(),
        &eval_tensor(config, &data.images)?,
        config.eval_batch_size,
    )?;
    let part_cosines: Vec<f64> = if config.concat {
        emb.parts.iter().map(|p| mean_row_cosine(&emb.global, p)).collect()
    } else {
        Vec::new()
    };
    let mut report = String::new();
    writeln!(report, "steps = {}", losses.len())?;
    writeln!(report, "num_classes = {}", ids.len())?;
    if let Some(last) = losses.last() {
        writeln!(report, "final_total = {}", last.total)?;
    }
    for (p, c) in part_cosines.iter().enumerate() {
        writeln!(report, "cos_global_part{p} = {c}")?;
    }
    fs::write(config.out_dir.join(TRAIN_REPORT), report)?;

    Ok(TrainOutcome {
        losses,
        checkpoint: ckpt,
        num_classes: ids.len(),
        part_cosines,
    })
}

/// A checkpoint checked against the run config.
pub struct LoadedModel {
    pub model: OcNet,
    pub store: ParamStore,
}

pub fn load_model(config: &RunConfig, path: &Path) -> Result<LoadedModel> {
    let (text, store) = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let saved: ModelConfig = toml::from_str(&text).context("checkpoint carries an unreadable model config")?;
    let expected = config.model(saved.num_classes);
    if saved != expected {
        let a = toml::to_string(&saved)?;
        let b = toml::to_string(&expected)?;
        let diff: Vec<String> = a
            .lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .map(|(x, y)| format!("checkpoint `{x}` vs config `{y}`"))
            .collect();
        bail!(
            "checkpoint {} does not match the config: {}",
            path.display(),
            diff.join("; ")
        );
    }
    let model = OcNet::new(expected)?;
    model
        .init_params(0)
        .check_compatible(&store)
        .with_context(|| format!("checkpoint {} tensors do not match the model", path.display()))?;
    Ok(LoadedModel { model, store })
}

fn to_records(emb: &Embeddings, samples: &[SampleRecord], normalize: bool) -> Vec<GalleryRecord> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let r = GalleryRecord {
                final_: emb.final_.row(i).to_vec(),
                backbone: emb.backbone.row(i).to_vec(),
                identity: s.identity,
                camera: s.camera,
                path: s.path.clone(),
            };
            if normalize {
                r.l2_normalized()
            } else {
                r
            }
        })
        .collect()
}

/// Query and gallery features of a checkpoint. Queries exclude junk and
/// distractor identities; the gallery drops junk images only.
pub struct EvalFeatures {
    pub queries: Vec<GalleryRecord>,
    pub query_tags: Vec<OcclusionTag>,
    pub query_images: Vec<RgbImage>,
    pub gallery: Vec<GalleryRecord>,
    pub gallery_images: Vec<RgbImage>,
}

pub fn eval_features(config: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalFeatures> {
    let path = checkpoint.map_or_else(|| config.out_dir.join(CHECKPOINT), Path::to_path_buf);
    let LoadedModel { model, store } = load_model(config, &path)?;
    let q = load_split(config, Split::Query, |s| s.identity > 0)?;
    let g = load_split(config, Split::Gallery, |s| !s.is_junk())?;
    let qe = model.embed(&store, &eval_tensor(config, &q.images)?, config.eval_batch_size)?;
    let ge = model.embed(&store, &eval_tensor(config, &g.images)?, config.eval_batch_size)?;
    Ok(EvalFeatures {
        queries: to_records(&qe, &q.records, config.normalize_features),
        query_tags: q.records.iter().map(|s| s.occlusion).collect(),
        query_images: q.images,
        gallery: to_records(&ge, &g.records, config.normalize_features),
        gallery_images: g.images,
    })
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub overall: EvalResult,
    /// `None` when no query falls in the stratum.
    pub strata: BTreeMap<String, Option<EvalResult>>,
    pub mean_distance: f64,
    pub mean_distance_alpha0: f64,
    pub report_path: PathBuf,
}

impl EvalReport {
    pub fn stratum(&self, name: &str) -> Option<&EvalResult> {
        self.strata.get(name).and_then(Option::as_ref)
    }
}

fn matrix_mean(m: &DistanceMatrix) -> f64 {
    let n = m.num_queries() * m.num_gallery();
    (0..m.num_queries()).map(|q| m.row(q).iter().sum::<f64>()).sum::<f64>() / n as f64
}

/// Metrics over the query rows selected by `keep`.
pub fn evaluate_subset(
    dist: &DistanceMatrix,
    queries: &[GalleryRecord],
    gallery: &[GalleryRecord],
    keep: impl Fn(usize) -> bool,
    config: &RunConfig,
) -> Result<Option<EvalResult>> {
    let rows: Vec<usize> = (0..queries.len()).filter(|&i| keep(i)).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let sub = DistanceMatrix::from_rows(rows.iter().map(|&i| dist.row(i).to_vec()).collect(), dist.alpha)?;
    let q_ids: Vec<i64> = rows.iter().map(|&i| queries[i].identity).collect();
    let q_cams: Vec<u32> = rows.iter().map(|&i| queries[i].camera).collect();
    let g_ids: Vec<i64> = gallery.iter().map(|r| r.identity).collect();
    let g_cams: Vec<u32> = gallery.iter().map(|r| r.camera).collect();
    Ok(Some(cmc_map_with(
        &sub,
        &q_ids,
        &q_cams,
        &g_ids,
        &g_cams,
        config.protocol(),
    )?))
}

pub fn evaluate(config: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    config.validate()?;
    let feats = eval_features(config, checkpoint)?;
    fs::create_dir_all(&config.out_dir)?;
    config.write_resolved(&config.out_dir)?;
    for (name, records) in [(QUERY_FEATURES, &feats.queries), (GALLERY_FEATURES, &feats.gallery)] {
        FeatureFile {
            alpha: config.alpha,
            records: records.clone(),
        }
        .save(&config.out_dir.join(name))?;
    }

    let dist = distance_matrix(&feats.queries, &feats.gallery, config.alpha)?;
    let dist0 = distance_matrix(&feats.queries, &feats.gallery, 0.0)?;
    let overall =
        evaluate_subset(&dist, &feats.queries, &feats.gallery, |_| true, config)?.expect("query split is non-empty");
    let mut strata = BTreeMap::new();
    for name in STRATA {
        let r = evaluate_subset(
            &dist,
            &feats.queries,
            &feats.gallery,
            |i| in_stratum(feats.query_tags[i], name),
            config,
        )?;
        strata.insert(name.to_string(), r);
    }

    let mut text = String::new();
    writeln!(text, "alpha = {}", config.alpha)?;
    writeln!(text, "num_queries = {}", feats.queries.len())?;
    writeln!(text, "num_gallery = {}", feats.gallery.len())?;
    writeln!(text, "mean_distance = {}", matrix_mean(&dist))?;
    writeln!(text, "mean_distance_alpha0 = {}", matrix_mean(&dist0))?;
    text.push_str(&overall.to_kv("overall."));
    for (name, r) in &strata {
        match r {
            Some(r) => text.push_str(&r.to_kv(&format!("{name}."))),
            None => writeln!(text, "{name}.valid_queries = 0")?,
        }
    }
    let report_path = config.out_dir.join(EVAL_REPORT);
    fs::write(&report_path, text)?;
    Ok(EvalReport {
        overall,
        strata,
        mean_distance: matrix_mean(&dist),
        mean_distance_alpha0: matrix_mean(&dist0),
        report_path,
    })
}

/// One configuration of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Leg {
    pub name: &'static str,
    pub concat: bool,
    pub cfm: bool,
    pub sl: bool,
    pub ram: bool,
}

pub const LEGS: [Leg; 6] = [
    Leg {
        name: "baseline",
        concat: false,
        cfm: false,
        sl: false,
        ram: false,
    },
    Leg {
        name: "concat",
        concat: true,
        cfm: false,
        sl: false,
        ram: false,
    },
    Leg {
        name: "cfm",
        concat: true,
        cfm: true,
        sl: false,
        ram: false,
    },
    Leg {
        name: "sl",
        concat: true,
        cfm: false,
        sl: true,
        ram: false,
    },
    Leg {
        name: "ram",
        concat: true,
        cfm: false,
        sl: false,
        ram: true,
    },
    Leg {
        name: "full",
        concat: true,
        cfm: true,
        sl: true,
        ram: true,
    },
];

impl Leg {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            concat: self.concat,
            cfm: self.cfm,
            sl: self.sl,
            ram: self.ram,
            out_dir: base.out_dir.join("ablation").join(self.name),
            ..base.clone()
        }
    }
}

#[derive(Debug)]
pub struct AblationRow {
    pub leg: Leg,
    pub out_dir: PathBuf,
    pub result: Result<EvalReport>,
}

pub fn ablate(config: &RunConfig) -> Result<Vec<AblationRow>> {
    config.validate()?;
    config.write_resolved(&config.out_dir)?;
    let rows: Vec<AblationRow> = LEGS
        .iter()
        .map(|leg| {
            let leg_config = leg.apply(config);
            info!("ablation leg `{}`", leg.name);
            let result = train(&leg_config).and_then(|_| evaluate(&leg_config, None));
            if let Err(e) = &result {
                log::error!("ablation leg `{}` failed: {e:#}", leg.name);
            }
            AblationRow {
                leg: *leg,
                out_dir: leg_config.out_dir,
                result,
            }
        })
        .collect();
    fs::write(config.out_dir.join(ABLATION_TABLE), ablation_table(&rows))?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "-" };
    let mut s = String::from("index\tleg\tconcat\tcfm\tsl\tram\tstatus\trank1\tmap");
    for name in STRATA {
        let _ = write!(s, "\t{name}_rank1\t{name}_map");
    }
    s.push_str("\terror\n");
    for (i, row) in rows.iter().enumerate() {
        let l = &row.leg;
        let _ = write!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            i + 1,
            l.name,
            mark(l.concat),
            mark(l.cfm),
            mark(l.sl),
            mark(l.ram)
        );
        match &row.result {
            Ok(r) => {
                let _ = write!(s, "\tok\t{:.4}\t{:.4}", r.overall.rank1, r.overall.map);
                for name in STRATA {
                    match r.stratum(name) {
                        Some(e) => {
                            let _ = write!(s, "\t{:.4}\t{:.4}", e.rank1, e.map);
                        }
                        None => s.push_str("\t-\t-"),
                    }
                }
                s.push_str("\t\n");
            }
            Err(e) => {
                s.push_str("\tfailed\t-\t-");
                for _ in STRATA {
                    s.push_str("\t-\t-");
                }
                let msg = format!("{e:#}").replace(['\t', '\n'], " ");
                let _ = writeln!(s, "\t{msg}");
            }
        }
    }
    s
}

fn framed(img: &RgbImage, color: Rgb<u8>, border: u32) -> RgbImage {
    let (w, h) = (img.width() + 2 * border, img.height() + 2 * border);
    let mut out = RgbImage::from_pixel(w, h, color);
    image::imageops::replace(&mut out, img, border as i64, border as i64);
    out
}

/// Query image followed by the ranked gallery images, framed green for
/// correct and red for incorrect matches.
pub fn ranking_grid(query: &RgbImage, ranked: &[(&RgbImage, bool)]) -> RgbImage {
    const BORDER: u32 = 2;
    const GAP: u32 = 4;
    let tiles: Vec<RgbImage> = std::iter::once(framed(query, Rgb([40, 40, 40]), BORDER))
        .chain(ranked.iter().map(|(img, ok)| {
            let c = if *ok { Rgb([0, 170, 0]) } else { Rgb([200, 0, 0]) };
            framed(img, c, BORDER)
        }))
        .collect();
    let height = tiles.iter().map(|t| t.height()).max().unwrap_or(1);
    let width = tiles.iter().map(|t| t.width()).sum::<u32>() + GAP * (tiles.len() as u32).saturating_sub(1) + GAP;
    let mut out = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut x = 0i64;
    for (i, t) in tiles.iter().enumerate() {
        image::imageops::replace(&mut out, t, x, 0);
        x += t.width() as i64 + GAP as i64 * if i == 0 { 2 } else { 1 };
    }
    out
}

#[derive(Clone, Debug)]
pub struct RankingExport {
    pub rows: Vec<RankingRow>,
    pub tsv_path: PathBuf,
    pub grid_path: Option<PathBuf>,
}

pub fn export_ranking(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    query: usize,
    k: usize,
    grid: bool,
) -> Result<RankingExport> {
    config.validate()?;
    let feats = eval_features(config, checkpoint)?;
    if query >= feats.queries.len() {
        bail!("query index {query} out of range ({} queries)", feats.queries.len());
    }
    let dist = distance_matrix(&feats.queries[query..=query], &feats.gallery, config.alpha)?;
    let rows = rank_gallery(0, &dist, &feats.queries[query], &feats.gallery, k)?;
    fs::create_dir_all(&config.out_dir)?;
    config.write_resolved(&config.out_dir)?;
    let tsv_path = config.out_dir.join(format!("ranking_q{query}.tsv"));
    fs::write(&tsv_path, ranking_tsv(&rows))?;
    let grid_path = if grid {
        let ranked: Vec<(&RgbImage, bool)> = rows
            .iter()
            .map(|r| (&feats.gallery_images[r.gallery_index], r.correct))
            .collect();
        let path = config.out_dir.join(format!("ranking_q{query}.png"));
        ranking_grid(&feats.query_images[query], &ranked).save(&path)?;
        Some(path)
    } else {
        None
    };
    Ok(RankingExport {
        rows,
        tsv_path,
        grid_path,
    })
}
