//! Implementation of each subcommand against an output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use log::{info, warn};
use meshflow_core::autoencoder::{LatentDataset, LatentRecord, PreparedMesh, Vae, VaeConfig, VaeTrainer};
use meshflow_core::checkpoint::Checkpoint;
use meshflow_core::dit::{
    complete, generate, generate_batch, toy_condition_features, Dit, DitConfig, DitTrainer, GenerateRequest, Generated,
    TOY_FEATURE_DIM,
};
use meshflow_core::flow::CfgWeights;
use meshflow_core::geometry::{
    canonicalize, dequantize, generate_synthetic, hausdorff_distance, normalize, parse_obj, random_shape, write_obj,
    CanonicalMesh, Mesh, ShapeKind, SyntheticShape,
};
use meshflow_core::kv::KvMap;
use meshflow_core::metrics::{evaluate_with_grid, MetricReport};
use meshflow_core::nn::{AdamW, ParameterStore, Tensor};
use meshflow_core::rng::SeedStream;
use meshflow_core::Error;

use crate::config::RunConfig;
use crate::gradcheck::{format_results, run_cases, suite, Profile};
use crate::manifest::{assign_splits, Manifest, ManifestRecord, Split};

pub type CmdResult<T> = anyhow::Result<T>;

/// Resolves the artifact path stored under `key` against the output directory.
pub fn artifact(cfg: &RunConfig, out: &Path, key: &str) -> PathBuf {
    out.join(cfg.text(key))
}

fn require_file(path: &Path, hint: &str) -> CmdResult<()> {
    if !path.is_file() {
        return Err(Error::validation(format!("{} not found; {hint}", path.display())).into());
    }
    Ok(())
}

/// `*.obj` files of a directory, sorted by file name.
pub fn obj_files(dir: &Path) -> CmdResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::validation(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_mesh(path: &Path) -> CmdResult<Mesh> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_obj(&bytes).with_context(|| format!("parsing {}", path.display()))?)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

// ---------------------------------------------------------------- synth

/// Writes `count` primitives, cycling through `kinds`. `grid_cells`, when non-empty,
/// restricts grids to those cell counts (cycled as well).
pub fn cmd_synth(out: &Path, kinds: &[ShapeKind], count: usize, grid_cells: &[usize], seed: u64) -> CmdResult<Vec<PathBuf>> {
    if count == 0 || kinds.is_empty() {
        return Err(Error::validation("synth needs count >= 1 and at least one kind").into());
    }
    fs::create_dir_all(out)?;
    let s = SeedStream::new(seed).sub("synth");
    let mut written = Vec::with_capacity(count);
    let mut grids = 0;
    for i in 0..count {
        let kind = kinds[i % kinds.len()];
        let item = s.index(i as u64);
        let mut shape = random_shape(kind, &mut item.rng("shape"));
        if let (SyntheticShape::Grid { cells, .. }, false) = (&mut shape, grid_cells.is_empty()) {
            *cells = grid_cells[grids % grid_cells.len()];
            grids += 1;
        }
        let mesh = generate_synthetic(&shape, item.derive("mesh"))?;
        let name = format!("synth_{i:04}_{kind}.obj");
        let path = out.join(name);
        fs::write(&path, write_obj(&mesh))?;
        written.push(path);
    }
    info!("wrote {count} meshes to {}", out.display());
    Ok(written)
}

// ---------------------------------------------------------------- preprocess

/// Normalizes, canonicalizes and filters every OBJ of `input`, writing canonical meshes
/// and the manifest under `out`. With `originals`, a mesh whose same-named original is
/// farther than `sigma_hausdorff` is dropped.
pub fn cmd_preprocess(cfg: &RunConfig, out: &Path, input: &Path, originals: Option<&Path>) -> CmdResult<Manifest> {
    let resolution = cfg.resolution()?;
    let budget: usize = cfg.get("face_budget")?;
    let allow_oversize: bool = cfg.get("allow_oversize")?;
    let sigma: f64 = cfg.get("sigma_hausdorff")?;
    let samples: usize = cfg.get("hausdorff_samples")?;
    let seed = cfg.seed();
    let mesh_dir = artifact(cfg, out, "paths.meshes");
    fs::create_dir_all(&mesh_dir)?;
    let mut kept: Vec<(String, CanonicalMesh)> = Vec::new();
    for path in obj_files(input)? {
        let name = stem(&path);
        let processed = (|| -> CmdResult<Option<CanonicalMesh>> {
            let mesh = normalize(&read_mesh(&path)?)?;
            let cm = canonicalize(&mesh, resolution)?;
            if cm.faces.is_empty() {
                warn!("skipping {name}: no faces survive canonicalization");
                return Ok(None);
            }
            if cm.faces.len() > budget && !allow_oversize {
                warn!("skipping {name}: {} faces exceed the budget of {budget}", cm.faces.len());
                return Ok(None);
            }
            if let Some(dir) = originals {
                let orig_path = dir.join(path.file_name().unwrap_or_default());
                if orig_path.is_file() {
                    let orig = normalize(&read_mesh(&orig_path)?)?;
                    let h = hausdorff_distance(&orig, &dequantize(&cm), samples, SeedStream::new(seed).derive(&name))?;
                    if h > sigma {
                        warn!("skipping {name}: Hausdorff distance {h:.4} to the original exceeds {sigma}");
                        return Ok(None);
                    }
                }
            }
            Ok(Some(cm))
        })();
        match processed {
            Ok(Some(cm)) => kept.push((name, cm)),
            Ok(None) => {}
            Err(e) => warn!("skipping {}: {e:#}", path.display()),
        }
    }
    if kept.is_empty() {
        return Err(Error::validation(format!("no usable meshes in {}", input.display())).into());
    }
    let names: Vec<String> = kept.iter().map(|(n, _)| n.clone()).collect();
    let splits = assign_splits(&names, cfg.get("split_ratio")?, seed);
    let mut records = Vec::with_capacity(kept.len());
    for ((name, cm), split) in kept.iter().zip(splits) {
        let file = format!("{}/{name}.obj", cfg.text("paths.meshes"));
        fs::write(out.join(&file), write_obj(&dequantize(cm)))?;
        records.push(ManifestRecord { name: name.clone(), faces: cm.faces.len(), split, path: file });
    }
    let manifest = Manifest { resolution, records };
    fs::write(artifact(cfg, out, "paths.manifest"), manifest.to_text())?;
    info!(
        "manifest: {} meshes ({} train, {} val)",
        manifest.records.len(),
        manifest.split(Split::Train).count(),
        manifest.split(Split::Val).count()
    );
    Ok(manifest)
}

/// Canonical meshes of one split, in manifest order.
pub fn load_split(cfg: &RunConfig, out: &Path, split: Split) -> CmdResult<(Manifest, Vec<CanonicalMesh>)> {
    let path = artifact(cfg, out, "paths.manifest");
    require_file(&path, "run `meshflow preprocess` first")?;
    let manifest = Manifest::load(&path)?;
    if manifest.resolution != cfg.resolution()? {
        bail!(Error::validation(format!(
            "manifest resolution {} differs from config resolution {}",
            manifest.resolution,
            cfg.resolution()?
        )));
    }
    let meshes = manifest
        .split(split)
        .map(|r| Ok(canonicalize(&read_mesh(&out.join(&r.path))?, manifest.resolution)?))
        .collect::<CmdResult<Vec<_>>>()?;
    if meshes.is_empty() {
        bail!(Error::validation(format!("manifest has no {split} meshes")));
    }
    Ok((manifest, meshes))
}

// ---------------------------------------------------------------- checkpoints

pub fn load_vae(path: &Path) -> CmdResult<(Vae, ParameterStore<f32>, Checkpoint)> {
    require_file(path, "run `meshflow train-vae` first")?;
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind("vae")?;
    let cfg = VaeConfig::from_kv(&ckpt.config, "vae.")?;
    let mut store = ParameterStore::new(0);
    let vae = Vae::new(&cfg, &mut store)?;
    ckpt.load_parameters(&mut store)?;
    Ok((vae, store, ckpt))
}

pub fn load_dit(path: &Path) -> CmdResult<(Dit, ParameterStore<f32>, Checkpoint)> {
    require_file(path, "run `meshflow train-dit` first")?;
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind("dit")?;
    let cfg = DitConfig::from_kv(&ckpt.config, "dit.")?;
    let mut store = ParameterStore::new(0);
    let dit = Dit::new(&cfg, &mut store)?;
    ckpt.load_parameters(&mut store)?;
    Ok((dit, store, ckpt))
}

fn with_seed(mut kv: KvMap, seed: u64) -> KvMap {
    kv.set("train.seed", seed);
    kv
}

fn progress(label: &str, step: u64, total: u64, loss: f64, start: &Instant, first: u64) {
    let rate = (step - first) as f64 / start.elapsed().as_secs_f64().max(1e-9);
    info!("{label} step {step}/{total} loss {loss:.5} ({rate:.1} steps/s)");
}

// ---------------------------------------------------------------- train-vae

/// Trains up to the configured step count, or only up to `until` when given.
pub fn cmd_train_vae(cfg: &RunConfig, out: &Path, resume: bool, until: Option<u64>) -> CmdResult<()> {
    let (_, meshes) = load_split(cfg, out, Split::Train)?;
    let model_cfg = cfg.vae_config()?;
    let train = cfg.vae_train()?;
    let seed = cfg.seed();
    let path = artifact(cfg, out, "paths.vae");
    let mut trainer = if resume && path.is_file() {
        let (vae, store, ckpt) = load_vae(&path)?;
        if vae.cfg != model_cfg {
            bail!(Error::validation("checkpoint model shapes differ from the config; remove it or drop --resume"));
        }
        let opt = ckpt.load_optimizer(train.optim, &store)?;
        info!("resuming autoencoder training at step {}", opt.step_count());
        VaeTrainer::from_parts(vae, store, opt, train.clone(), meshes, seed)?
    } else {
        VaeTrainer::new(&model_cfg, train.clone(), meshes, seed)?
    };
    let (every, log_every): (u64, u64) = (cfg.get("checkpoint_every")?, cfg.get("log_every")?);
    let save = |t: &VaeTrainer| -> CmdResult<()> {
        let kv = with_seed(t.model.cfg.to_kv("vae."), seed);
        Ok(Checkpoint::from_training("vae", kv, &t.store, Some(&t.opt)).save(&path)?)
    };
    let (start, first) = (Instant::now(), trainer.steps_done());
    let stop = until.map_or(train.steps, |u| u.min(train.steps));
    while trainer.steps_done() < stop {
        let s = trainer.step()?;
        if log_every > 0 && (s.step % log_every == 0 || s.step == train.steps) {
            progress("vae", s.step, train.steps, s.loss, &start, first);
        }
        if every > 0 && s.step % every == 0 {
            save(&trainer)?;
        }
    }
    save(&trainer)?;
    info!("saved {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------- encode

/// Seed of the condition features of training mesh `i`.
pub fn feature_seed(seed: u64, i: usize) -> u64 {
    SeedStream::new(seed).sub("features").index(i as u64).root()
}

pub fn cmd_encode(cfg: &RunConfig, out: &Path) -> CmdResult<LatentDataset> {
    let (_, meshes) = load_split(cfg, out, Split::Train)?;
    let (vae, store, _) = load_vae(&artifact(cfg, out, "paths.vae"))?;
    let with_features: bool = cfg.get("dit.cross_attention")?;
    let prepared = meshes.into_iter().map(PreparedMesh::new).collect::<Result<Vec<_>, _>>()?;
    let mut records = Vec::with_capacity(prepared.len());
    for (chunk_idx, chunk) in prepared.chunks(16).enumerate() {
        let refs: Vec<&PreparedMesh> = chunk.iter().collect();
        for (j, (mu, logvar)) in vae.encode_meshes(&store, &refs)?.into_iter().enumerate() {
            let i = chunk_idx * 16 + j;
            let features = if with_features {
                Some(toy_condition_features::<f32>(&dequantize(&chunk[j].mesh), feature_seed(cfg.seed(), i))?)
            } else {
                None
            };
            records.push(LatentRecord { mu, logvar, features });
        }
    }
    let data = LatentDataset::new(vae.cfg.latent_dim, if with_features { TOY_FEATURE_DIM } else { 0 }, records)?;
    let path = artifact(cfg, out, "paths.latents");
    data.save(&path)?;
    info!("encoded {} meshes to {}", data.records.len(), path.display());
    Ok(data)
}

// ---------------------------------------------------------------- train-dit

/// Trains up to the configured step count, or only up to `until` when given.
pub fn cmd_train_dit(cfg: &RunConfig, out: &Path, resume: bool, until: Option<u64>) -> CmdResult<()> {
    let latents = artifact(cfg, out, "paths.latents");
    require_file(&latents, "run `meshflow encode` first")?;
    let data = LatentDataset::load(&latents)?;
    let model_cfg = cfg.dit_config()?;
    let train = cfg.dit_train()?;
    let seed = cfg.seed();
    let path = artifact(cfg, out, "paths.dit");
    let mut trainer = if resume && path.is_file() {
        let (dit, store, ckpt) = load_dit(&path)?;
        if (DitConfig { latent_scale: model_cfg.latent_scale, ..dit.cfg.clone() }) != model_cfg {
            bail!(Error::validation("checkpoint model shapes differ from the config; remove it or drop --resume"));
        }
        let opt: AdamW<f32> = ckpt.load_optimizer(train.optim, &store)?;
        info!("resuming velocity model training at step {}", opt.step_count());
        DitTrainer::from_parts(dit, store, opt, train.clone(), data, seed)?
    } else {
        DitTrainer::new(&model_cfg, train.clone(), data, seed)?
    };
    let (every, log_every): (u64, u64) = (cfg.get("checkpoint_every")?, cfg.get("log_every")?);
    let save = |t: &DitTrainer| -> CmdResult<()> {
        let kv = with_seed(t.model.cfg.to_kv("dit."), seed);
        Ok(Checkpoint::from_training("dit", kv, &t.store, Some(&t.opt)).save(&path)?)
    };
    let (start, first) = (Instant::now(), trainer.steps_done());
    let stop = until.map_or(train.steps, |u| u.min(train.steps));
    while trainer.steps_done() < stop {
        let s = trainer.step()?;
        if log_every > 0 && (s.step % log_every == 0 || s.step == train.steps) {
            progress("dit", s.step, train.steps, s.loss, &start, first);
        }
        if every > 0 && s.step % every == 0 {
            save(&trainer)?;
        }
    }
    save(&trainer)?;
    info!("saved {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------- sample / complete

/// Noise seed of sample `index` for `faces` faces under root `seed`.
pub fn sample_seed(seed: u64, faces: usize, index: usize) -> u64 {
    SeedStream::new(seed).sub("sample").sub(&format!("faces-{faces}")).index(index as u64).root()
}

fn cfg_text(cfg: CfgWeights) -> String {
    match cfg {
        CfgWeights::Off => "off".into(),
        CfgWeights::Single(w) => format!("single({w})"),
        CfgWeights::Dual(w1, w2) => format!("dual({w1},{w2})"),
    }
}

fn tokens_text(tokens: &[f32], latent_dim: usize) -> String {
    tokens
        .chunks(latent_dim.max(1))
        .map(|row| row.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

/// Reference-shape features for cross-attention models.
pub fn condition_features(dit: &Dit, condition: Option<&Path>, seed: u64) -> CmdResult<Option<Tensor<f32>>> {
    match (condition, dit.cfg.use_cross_attention) {
        (None, _) => Ok(None),
        (Some(_), false) => bail!(Error::validation("--condition needs a model trained with dit.cross_attention = true")),
        (Some(p), true) => {
            let mesh = normalize(&read_mesh(p)?)?;
            Ok(Some(toy_condition_features(&mesh, SeedStream::new(seed).derive("condition"))?))
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleArgs {
    pub faces: Vec<usize>,
    pub count: usize,
    pub condition: Option<PathBuf>,
    pub batched: bool,
    pub dest: Option<PathBuf>,
}

/// Generates `count` meshes per requested face count. Failed samples leave their raw tokens
/// next to the sidecar, the remaining samples still run, and the command then fails.
pub fn cmd_sample(cfg: &RunConfig, out: &Path, args: &SampleArgs) -> CmdResult<Vec<PathBuf>> {
    if args.faces.is_empty() || args.count == 0 {
        bail!(Error::validation("sample needs --faces and --count >= 1"));
    }
    let (vae, vstore, _) = load_vae(&artifact(cfg, out, "paths.vae"))?;
    let (dit, dstore, _) = load_dit(&artifact(cfg, out, "paths.dit"))?;
    let features = condition_features(&dit, args.condition.as_deref(), cfg.seed())?;
    let opts = cfg.sampling(features.is_some())?;
    let dest = args.dest.clone().unwrap_or_else(|| out.join("samples"));
    fs::create_dir_all(&dest)?;
    let mut jobs = Vec::new();
    for &f in &args.faces {
        for i in 0..args.count {
            jobs.push((f, i, GenerateRequest { face_count: f, features: features.as_ref(), seed: sample_seed(cfg.seed(), f, i) }));
        }
    }
    let results: Vec<meshflow_core::Result<Generated>> = if args.batched {
        let reqs: Vec<GenerateRequest<'_>> = jobs.iter().map(|j| j.2.clone()).collect();
        generate_batch(&dit, &dstore, &vae, &vstore, &reqs, opts)?
    } else {
        jobs.iter().map(|j| generate(&dit, &dstore, &vae, &vstore, &j.2, opts)).collect()
    };
    let mut written = Vec::new();
    let mut failures = 0;
    for ((f, i, req), result) in jobs.iter().zip(results) {
        let base = dest.join(format!("faces{f:04}_{i:04}"));
        let mut side = KvMap::new();
        side.set("seed", cfg.seed());
        side.set("noise_seed", req.seed);
        side.set("face_count", f);
        side.set("cfg", cfg_text(opts.cfg));
        side.set("steps", opts.steps);
        side.set("conditioned", features.is_some());
        match result {
            Ok(g) => {
                side.set("status", "ok");
                side.set("evaluations", g.evaluations);
                let obj = base.with_extension("obj");
                fs::write(&obj, write_obj(&dequantize(&g.mesh)))?;
                written.push(obj);
            }
            Err(Error::Generation { reason, tokens, latent_dim }) => {
                failures += 1;
                warn!("sample faces={f} #{i} failed: {reason}");
                side.set("status", format!("failed: {reason}"));
                fs::write(base.with_extension("tokens.txt"), tokens_text(&tokens, latent_dim))?;
            }
            Err(e) => return Err(e.into()),
        }
        fs::write(base.with_extension("txt"), side.to_text())?;
    }
    if failures > 0 {
        bail!(Error::Generation {
            reason: format!("{failures} of {} samples failed to decode; raw tokens written beside the sidecars", jobs.len()),
            tokens: Vec::new(),
            latent_dim: vae.cfg.latent_dim,
        });
    }
    info!("wrote {} meshes to {}", written.len(), dest.display());
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct CompleteArgs {
    pub partial: PathBuf,
    pub total: usize,
    pub count: usize,
    pub condition: Option<PathBuf>,
    pub dest: Option<PathBuf>,
}

/// Loads a partial mesh that is already in normalized coordinates.
pub fn read_partial(path: &Path, resolution: u32) -> CmdResult<CanonicalMesh> {
    let mesh = read_mesh(path)?;
    if mesh.vertices.iter().flatten().any(|c| !(-1.0..=1.0).contains(c)) {
        bail!(Error::validation(format!("{}: partial mesh coordinates must lie in [-1, 1]", path.display())));
    }
    Ok(canonicalize(&mesh, resolution)?)
}

pub fn complete_seed(seed: u64, index: usize) -> u64 {
    SeedStream::new(seed).sub("complete").index(index as u64).root()
}

pub fn cmd_complete(cfg: &RunConfig, out: &Path, args: &CompleteArgs) -> CmdResult<Vec<PathBuf>> {
    let (vae, vstore, _) = load_vae(&artifact(cfg, out, "paths.vae"))?;
    let (dit, dstore, _) = load_dit(&artifact(cfg, out, "paths.dit"))?;
    let partial = read_partial(&args.partial, vae.cfg.resolution)?;
    let features = condition_features(&dit, args.condition.as_deref(), cfg.seed())?;
    let opts = cfg.sampling(features.is_some())?;
    let dest = args.dest.clone().unwrap_or_else(|| out.join("completions"));
    fs::create_dir_all(&dest)?;
    let mut written = Vec::new();
    for i in 0..args.count.max(1) {
        let seed = complete_seed(cfg.seed(), i);
        let done = complete(&dit, &dstore, &vae, &vstore, &partial, args.total, features.as_ref(), opts, seed)?;
        let base = dest.join(format!("complete{:04}_{i:04}", args.total));
        let mut side = KvMap::new();
        side.set("seed", cfg.seed());
        side.set("noise_seed", seed);
        side.set("known_faces", done.known);
        side.set("face_count", args.total);
        side.set("cfg", cfg_text(opts.cfg));
        side.set("steps", opts.steps);
        fs::write(base.with_extension("txt"), side.to_text())?;
        let obj = base.with_extension("obj");
        fs::write(&obj, write_obj(&dequantize(&done.mesh)))?;
        written.push(obj);
    }
    Ok(written)
}

// ---------------------------------------------------------------- eval

pub fn load_obj_dir(dir: &Path) -> CmdResult<Vec<Mesh>> {
    let files = obj_files(dir)?;
    if files.is_empty() {
        bail!(Error::validation(format!("no .obj files in {}", dir.display())));
    }
    files.iter().map(|p| read_mesh(p)).collect()
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, gen: &Path, reference: &Path) -> CmdResult<MetricReport> {
    let g = load_obj_dir(gen)?;
    let r = load_obj_dir(reference)?;
    let report = evaluate_with_grid(&g, &r, cfg.get("eval.points")?, cfg.get("eval.jsd_resolution")?, cfg.seed())?;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.txt"), report.to_table() + "\n")?;
    fs::write(out.join("metrics.kv"), report.to_records())?;
    Ok(report)
}

// ---------------------------------------------------------------- gradcheck

/// Runs the gradient suite; any failing block makes the command fail with its name.
pub fn cmd_gradcheck(profile: Profile) -> CmdResult<String> {
    let results = run_cases(&suite(profile));
    let text = format_results(&results);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        print!("{text}");
        bail!(Error::numeric(format!("gradient check failed for: {}", failed.join(", "))));
    }
    Ok(text)
}
