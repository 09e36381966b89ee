use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use maskbit::config::ExperimentConfig;
use maskbit::data::{image_grid, images_to_tensor, resize_center_crop, tensor_to_images, Dataset, Subset};
use maskbit::eval::{
    append_records, bit_flip_probe, compute_stats, feature_rows, frechet_distance, hamming_neighbors, inception_score,
    perceptual_neighbors, reconstruction_eval, softmax_rows, EvalRecord,
};
use maskbit::experiment::{
    run_roadmap, tokenize_dataset, train_stage1, train_stage2, train_stage2_online, RunManifest, Rung,
};
use maskbit::generator::{ClassLabel, GeneratorConfig};
use maskbit::losses::{extract_logits, FeatureExtractor};
use maskbit::quantizers::BitGrid;
use maskbit::sampler::generate;
use maskbit::tokenizer::Autoencoder;
use maskbit::tokens::TokenDataset;
use maskbit::trainer::{load_generator, load_tokenizer, Stage1Trainer, Stage2Trainer};
use maskbit::{Error, Real, Result};
use serde::Serialize;

use crate::{Command, TrainArgs};

const BATCH: usize = 32;

pub fn run<T: Real>(cmd: &Command, cfg: &ExperimentConfig) -> Result<()> {
    match cmd {
        Command::TrainStage1(a) => stage1::<T>(cfg, a),
        Command::Tokenize { tokenizer, out } => tokenize::<T>(cfg, tokenizer.as_deref(), out.as_deref()),
        Command::TrainStage2 {
            train,
            tokens,
            online,
            tokenizer,
        } => stage2::<T>(cfg, train, tokens.as_deref(), *online, tokenizer.as_deref()),
        Command::Sample {
            classes,
            per_class,
            unconditional,
            out,
        } => sample::<T>(cfg, classes, *per_class, *unconditional, out.as_deref()),
        Command::EvalRecon { limit } => eval_recon::<T>(cfg, *limit),
        Command::EvalGen { per_class, limit } => eval_gen::<T>(cfg, *per_class, *limit),
        Command::AnalyzeBitflip { index } => analyze_bitflip::<T>(cfg, *index),
        Command::AnalyzeNn { queries, k, limit } => analyze_nn::<T>(cfg, *queries, *k, *limit),
        Command::Roadmap {
            iters,
            eval_images,
            rungs,
        } => roadmap::<T>(cfg, *iters, *eval_images, rungs),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn resolution(cfg: &ExperimentConfig) -> u32 {
    cfg.data.resolution() as u32
}

fn open_log(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn write_json_lines<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut f = open_log(path)?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn record(cfg: &ExperimentConfig, metric: &str, value: f64, extractor: &str, samples: usize) -> EvalRecord {
    EvalRecord {
        metric: metric.to_string(),
        value,
        extractor: extractor.to_string(),
        samples,
        seed: cfg.seed,
    }
}

fn finish(dir: &Path, mut manifest: RunManifest, outputs: &[PathBuf], records: Vec<EvalRecord>) -> Result<()> {
    for p in outputs {
        manifest.add_output(p)?;
    }
    if !records.is_empty() {
        append_records(&dir.join("metrics.jsonl"), &records)?;
        for r in &records {
            println!("{} = {:.6} ({}, n={})", r.metric, r.value, r.extractor, r.samples);
        }
    }
    manifest.records = records;
    let path = manifest.write(dir)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Fails with a mismatch naming the generator field that disagrees with the tokens.
fn check_tokens(g: &GeneratorConfig, bits: usize, tokens: usize) -> Result<()> {
    if bits != g.bits {
        return Err(Error::ConfigMismatch {
            field: "generator.bits".into(),
            expected: bits.to_string(),
            found: g.bits.to_string(),
        });
    }
    if tokens != g.tokens {
        return Err(Error::ConfigMismatch {
            field: "generator.tokens".into(),
            expected: tokens.to_string(),
            found: g.tokens.to_string(),
        });
    }
    Ok(())
}

fn tokenizer_bits<T: Real>(tok: &Autoencoder<T>) -> Result<usize> {
    tok.bits()
        .ok_or_else(|| Error::Config("bit tokens need a tokenizer with a lookup-free quantizer".into()))
}

fn token_grid_size(cfg: &ExperimentConfig, tok_stride: usize) -> (usize, usize) {
    let side = cfg.data.resolution() / tok_stride;
    (side, side)
}

fn chunked_steps(total: u64, every: u64) -> Vec<u64> {
    if every == 0 || every >= total {
        return vec![total];
    }
    let mut v = vec![every; (total / every) as usize];
    if total % every != 0 {
        v.push(total % every);
    }
    v
}

fn stage1<T: Real>(cfg: &ExperimentConfig, a: &TrainArgs) -> Result<()> {
    let s1 = cfg.stage1();
    s1.validate()?;
    let dir = out_dir(cfg)?;
    let ckpt = dir.join("stage1.ckpt");
    let mut trainer = if a.resume && ckpt.exists() {
        Stage1Trainer::<T>::load_expecting(&ckpt, &s1)?
    } else {
        Stage1Trainer::<T>::new(&s1)?
    };
    let iters = a
        .iters
        .unwrap_or_else(|| s1.optim.stage1.total_iters.saturating_sub(trainer.step_count()));
    let data = cfg.data.open()?;
    let log = dir.join("stage1-log.jsonl");
    let every = a.log_every.max(1);
    for n in chunked_steps(iters, a.save_every) {
        let mut rows = Vec::new();
        train_stage1(&mut trainer, data.as_ref(), resolution(cfg), n, |r| {
            if r.step % every == 0 {
                eprintln!(
                    "stage1 step {} lr {:.3e} total {:.4} recon {:.4} grad {:.3}",
                    r.step, r.lr, r.total, r.recon, r.grad_norm
                );
                rows.push(*r);
            }
        })?;
        write_json_lines(&log, &rows)?;
        trainer.save(&ckpt)?;
    }
    finish(&dir, RunManifest::new("train-stage1", cfg)?, &[ckpt], Vec::new())
}

fn tokenize<T: Real>(cfg: &ExperimentConfig, tokenizer: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(cfg)?;
    let tok_path = tokenizer.map(Path::to_path_buf).unwrap_or_else(|| dir.join("stage1.ckpt"));
    let (tok, _, digest) = load_tokenizer::<T>(&tok_path)?;
    tokenizer_bits(&tok)?;
    let data = cfg.data.open()?;
    let ds = tokenize_dataset(&tok, &digest, data.as_ref(), resolution(cfg), BATCH)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("tokens.bin"));
    ds.write(&out)?;
    eprintln!(
        "tokenized {} images into {}x{} grids of {}-bit tokens",
        ds.len(),
        ds.grid.height,
        ds.grid.width,
        ds.grid.bits
    );
    finish(&dir, RunManifest::new("tokenize", cfg)?, &[out], Vec::new())
}

fn stage2<T: Real>(
    cfg: &ExperimentConfig,
    a: &TrainArgs,
    tokens: Option<&Path>,
    online: bool,
    tokenizer: Option<&Path>,
) -> Result<()> {
    let s2 = cfg.stage2();
    s2.generator.validate()?;
    s2.optim.validate()?;
    let dir = out_dir(cfg)?;
    let tok_path = tokenizer.map(Path::to_path_buf).unwrap_or_else(|| dir.join("stage1.ckpt"));
    let ckpt = dir.join("stage2.ckpt");
    let mut trainer = if a.resume && ckpt.exists() {
        Stage2Trainer::<T>::load_expecting(&ckpt, &s2)?
    } else {
        Stage2Trainer::<T>::new(&s2)?
    };
    let iters = a
        .iters
        .unwrap_or_else(|| s2.optim.stage2.total_iters.saturating_sub(trainer.step_count()));
    let log = dir.join("stage2-log.jsonl");
    let every = a.log_every.max(1);
    let mut rows = Vec::new();
    let mut on_step = |r: &maskbit::trainer::Stage2Report| {
        if r.step % every == 0 {
            eprintln!(
                "stage2 step {} lr {:.3e} loss {:.4} masked {} grad {:.3}",
                r.step, r.lr, r.loss, r.masked_groups, r.grad_norm
            );
            rows.push(*r);
        }
    };
    if online {
        let (tok, _, _) = load_tokenizer::<T>(&tok_path)?;
        let (h, w) = token_grid_size(cfg, tok.config().stride());
        check_tokens(&s2.generator, tokenizer_bits(&tok)?, h * w)?;
        let data = cfg.data.open()?;
        for n in chunked_steps(iters, a.save_every) {
            train_stage2_online(&mut trainer, &tok, data.as_ref(), resolution(cfg), n, &mut on_step)?;
            trainer.save(&ckpt)?;
        }
    } else {
        let path = tokens.map(Path::to_path_buf).unwrap_or_else(|| dir.join("tokens.bin"));
        let expected = if tok_path.exists() {
            Some(load_tokenizer::<T>(&tok_path)?.2)
        } else {
            None
        };
        let ds = TokenDataset::read(&path, expected.as_deref())?;
        check_tokens(&s2.generator, ds.grid.bits, ds.grid.tokens_per_sample())?;
        for n in chunked_steps(iters, a.save_every) {
            train_stage2(&mut trainer, &ds, n, &mut on_step)?;
            trainer.save(&ckpt)?;
        }
    }
    write_json_lines(&log, &rows)?;
    finish(&dir, RunManifest::new("train-stage2", cfg)?, &[ckpt], Vec::new())
}

/// Loads both stages from the output directory and checks they agree on the token format.
fn load_models<T: Real>(cfg: &ExperimentConfig) -> Result<(Autoencoder<T>, maskbit::generator::MaskBit<T>, usize, usize)> {
    let dir = out_dir(cfg)?;
    let (tok, _, _) = load_tokenizer::<T>(&dir.join("stage1.ckpt"))?;
    let (gen, s2) = load_generator::<T>(&dir.join("stage2.ckpt"))?;
    let (h, w) = token_grid_size(cfg, tok.config().stride());
    check_tokens(&s2.generator, tokenizer_bits(&tok)?, h * w)?;
    Ok((tok, gen, h, w))
}

fn labels(cfg: &ExperimentConfig, classes: &[u32], per_class: usize, unconditional: bool) -> Result<Vec<ClassLabel>> {
    let n = cfg.generator.num_classes as u32;
    let classes: Vec<u32> = if classes.is_empty() {
        (0..n).collect()
    } else {
        classes.to_vec()
    };
    if let Some(&c) = classes.iter().find(|&&c| c >= n) {
        return Err(Error::OutOfRange {
            what: "class id",
            value: c as i64,
            range: format!("[0, {n})"),
        });
    }
    Ok(classes
        .iter()
        .flat_map(|&c| std::iter::repeat_n(if unconditional { None } else { Some(c) }, per_class))
        .collect())
}

/// Generates in fixed chunks, each seeded from the configured seed and its chunk index.
fn generate_all<T: Real>(
    cfg: &ExperimentConfig,
    tok: &Autoencoder<T>,
    gen: &maskbit::generator::MaskBit<T>,
    labels: &[ClassLabel],
    h: usize,
    w: usize,
) -> Result<(BitGrid, Vec<image::RgbImage>)> {
    let mut grids = Vec::new();
    let mut images = Vec::new();
    for (i, chunk) in labels.chunks(BATCH).enumerate() {
        let mut sc = cfg.sample.clone();
        sc.seed = sc.seed.wrapping_add(i as u64);
        let (grid, imgs) = generate(gen, tok, chunk, h, w, &sc)?;
        grids.push(grid);
        images.extend(tensor_to_images(&imgs)?);
    }
    Ok((BitGrid::concat(&grids)?, images))
}

fn sample<T: Real>(
    cfg: &ExperimentConfig,
    classes: &[u32],
    per_class: usize,
    unconditional: bool,
    out: Option<&Path>,
) -> Result<()> {
    let dir = out_dir(cfg)?;
    let (tok, gen, h, w) = load_models::<T>(cfg)?;
    let labels = labels(cfg, classes, per_class, unconditional)?;
    let (grid, images) = generate_all(cfg, &tok, &gen, &labels, h, w)?;
    let sdir = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("samples"));
    std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
    let mut outputs = Vec::new();
    for (i, (img, l)) in images.iter().zip(&labels).enumerate() {
        let name = match l {
            Some(c) => format!("sample-{i:04}-class{c}.png"),
            None => format!("sample-{i:04}-uncond.png"),
        };
        let p = sdir.join(name);
        img.save(&p)?;
        outputs.push(p);
    }
    let p = sdir.join("grid.png");
    image_grid(&images, per_class.max(1))?.save(&p)?;
    outputs.push(p);
    let null = cfg.generator.num_classes as u32;
    let ids = labels.iter().map(|l| l.unwrap_or(null)).collect();
    let p = sdir.join("samples.tokens");
    TokenDataset::new(grid, ids, String::new())?.write(&p)?;
    outputs.push(p);
    eprintln!("wrote {} samples to {}", images.len(), sdir.display());
    finish(&dir, RunManifest::new("sample", cfg)?, &outputs, Vec::new())
}

fn eval_recon<T: Real>(cfg: &ExperimentConfig, limit: usize) -> Result<()> {
    let dir = out_dir(cfg)?;
    let (tok, _, _) = load_tokenizer::<T>(&dir.join("stage1.ckpt"))?;
    let data = cfg.data.open()?;
    let ex = cfg.perceptual.build::<T>()?;
    let e = reconstruction_eval::<T>(data.as_ref(), limit, resolution(cfg), BATCH, &tok, ex.as_ref())?;
    let records = vec![
        record(cfg, "rfid_proxy", e.rfid_proxy, &ex.id(), e.count),
        record(cfg, "recon_mse", e.mse, "pixels", e.count),
    ];
    finish(&dir, RunManifest::new("eval-recon", cfg)?, &[], records)
}

fn center_images(data: &dyn Dataset, size: u32) -> Result<Vec<image::RgbImage>> {
    (0..data.len()).map(|i| data.get(i).map(|(img, _)| resize_center_crop(&img, size))).collect()
}

fn features_of<T: Real>(images: &[image::RgbImage], ex: &dyn FeatureExtractor) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut feats = Vec::new();
    let mut probs = Vec::new();
    for chunk in images.chunks(BATCH) {
        let x = images_to_tensor::<T>(chunk)?;
        feats.extend(feature_rows(&x, ex)?);
        probs.extend(softmax_rows(&extract_logits(ex, &x)?)?);
    }
    Ok((feats, probs))
}

fn eval_gen<T: Real>(cfg: &ExperimentConfig, per_class: usize, limit: usize) -> Result<()> {
    let dir = out_dir(cfg)?;
    let (tok, gen, h, w) = load_models::<T>(cfg)?;
    let labels = labels(cfg, &[], per_class, false)?;
    let (_, fake) = generate_all(cfg, &tok, &gen, &labels, h, w)?;
    let data = cfg.data.open()?;
    let real = center_images(&Subset::spread(data.as_ref(), limit), resolution(cfg))?;
    let ex = cfg.perceptual.build::<T>()?;
    let (rf, _) = features_of::<T>(&real, ex.as_ref())?;
    let (ff, fp) = features_of::<T>(&fake, ex.as_ref())?;
    let fid = frechet_distance(&compute_stats(&rf)?, &compute_stats(&ff)?)?;
    let is = inception_score(&fp)?;
    let records = vec![
        record(cfg, "gfid_proxy", fid, &ex.id(), fake.len()),
        record(cfg, "is_proxy", is, &ex.id(), fake.len()),
    ];
    finish(&dir, RunManifest::new("eval-gen", cfg)?, &[], records)
}

fn analyze_bitflip<T: Real>(cfg: &ExperimentConfig, index: usize) -> Result<()> {
    let dir = out_dir(cfg)?;
    let (tok, _, _) = load_tokenizer::<T>(&dir.join("stage1.ckpt"))?;
    let k = tokenizer_bits(&tok)?;
    let data = cfg.data.open()?;
    if index >= data.len() {
        return Err(Error::OutOfRange {
            what: "image index",
            value: index as i64,
            range: format!("[0, {})", data.len()),
        });
    }
    let img = center_images(&Subset::new(data.as_ref(), vec![index])?, resolution(cfg))?;
    let x = images_to_tensor::<T>(&img)?;
    let grid = tok.tokenize_bits(&x)?;
    let base = tok.decode_grid(&grid)?;
    let mut tiles = img.clone();
    tiles.extend(tensor_to_images(&base)?);
    let mut records = Vec::new();
    for i in 0..k {
        let (_, flipped) = bit_flip_probe(&grid, i, &tok)?;
        let mse = maskbit::tokenizer::pixel_mse(&flipped, &base)?;
        records.push(record(cfg, &format!("bitflip_mse_bit{i}"), mse, "pixels", 1));
        tiles.extend(tensor_to_images(&flipped)?);
    }
    let p = dir.join(format!("bitflip-{index}.png"));
    image_grid(&tiles, tiles.len())?.save(&p)?;
    finish(&dir, RunManifest::new("analyze-bitflip", cfg)?, &[p], records)
}

#[derive(Serialize)]
struct NeighborRow {
    query: usize,
    class: u32,
    hamming: Vec<maskbit::eval::Neighbor>,
    perceptual: Vec<maskbit::eval::Neighbor>,
    overlap: usize,
}

fn analyze_nn<T: Real>(cfg: &ExperimentConfig, queries: usize, k: usize, limit: Option<usize>) -> Result<()> {
    let dir = out_dir(cfg)?;
    let (tok, _, digest) = load_tokenizer::<T>(&dir.join("stage1.ckpt"))?;
    tokenizer_bits(&tok)?;
    let data = cfg.data.open()?;
    let corpus = Subset::spread(data.as_ref(), limit.unwrap_or(data.len()));
    let n = corpus.len();
    let ds = tokenize_dataset(&tok, &digest, &corpus, resolution(cfg), BATCH)?;
    let grids: Vec<BitGrid> = (0..n).map(|i| ds.grid.slice(i..i + 1)).collect();
    let ex = cfg.perceptual.build::<T>()?;
    let (feats, _) = features_of::<T>(&center_images(&corpus, resolution(cfg))?, ex.as_ref())?;
    let drop_self = |q: usize, v: Vec<maskbit::eval::Neighbor>| -> Vec<maskbit::eval::Neighbor> {
        v.into_iter().filter(|nb| nb.index != q).take(k).collect()
    };
    let mut rows = Vec::new();
    let (mut same_h, mut same_p) = (0usize, 0usize);
    for q in maskbit::data::spread_indices(n, queries) {
        let h = drop_self(q, hamming_neighbors(&grids[q], &grids, k + 1)?);
        let p = drop_self(q, perceptual_neighbors(&feats[q], &feats, k + 1)?);
        let overlap = h.iter().filter(|a| p.iter().any(|b| b.index == a.index)).count();
        let class = ds.classes[q];
        same_h += h.iter().filter(|nb| ds.classes[nb.index] == class).count();
        same_p += p.iter().filter(|nb| ds.classes[nb.index] == class).count();
        rows.push(NeighborRow {
            query: q,
            class,
            hamming: h,
            perceptual: p,
            overlap,
        });
    }
    let p = dir.join("neighbors.jsonl");
    std::fs::remove_file(&p).ok();
    write_json_lines(&p, &rows)?;
    let total = rows.iter().map(|r| r.hamming.len()).sum::<usize>().max(1) as f64;
    let overlap = rows.iter().map(|r| r.overlap).sum::<usize>() as f64 / total;
    let records = vec![
        record(cfg, "nn_overlap", overlap, &ex.id(), rows.len()),
        record(cfg, "nn_hamming_class_agreement", same_h as f64 / total, "hamming", rows.len()),
        record(cfg, "nn_perceptual_class_agreement", same_p as f64 / total, &ex.id(), rows.len()),
    ];
    finish(&dir, RunManifest::new("analyze-nn", cfg)?, &[p], records)
}

fn roadmap<T: Real>(cfg: &ExperimentConfig, iters: u64, eval_images: usize, names: &[String]) -> Result<()> {
    let dir = out_dir(cfg)?;
    let rungs = if names.is_empty() {
        Rung::ALL.to_vec()
    } else {
        names.iter().map(|s| Rung::parse(s)).collect::<Result<Vec<_>>>()?
    };
    let data = cfg.data.open()?;
    let results = run_roadmap::<T>(cfg, &rungs, data.as_ref(), iters, eval_images)?;
    let ex = cfg.perceptual.build::<T>()?;
    println!("{:<16} {:>8} {:>12} {:>10}", "rung", "steps", "rfid_proxy", "mse");
    let mut records = Vec::new();
    for r in &results {
        println!("{:<16} {:>8} {:>12.5} {:>10.5}", r.rung.name(), iters, r.rfid_proxy, r.mse);
        records.push(record(cfg, &format!("roadmap.{}.rfid_proxy", r.rung.name()), r.rfid_proxy, &ex.id(), eval_images));
        records.push(record(cfg, &format!("roadmap.{}.mse", r.rung.name()), r.mse, "pixels", eval_images));
    }
    finish(&dir, RunManifest::new("roadmap", cfg)?, &[], records)
}
