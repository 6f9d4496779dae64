use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chowder::bagstore::{
    make_folds, write_bag, FeatureBag, Manifest, ManifestEntry, BAG_EXTENSION,
};
use chowder::metrics::{
    froc, froc_csv, roc_auc, roc_csv, roc_curve, LesionGroundTruth, LocalizationMap, DEFAULT_TAU,
    FROC_FP_RATES,
};
use chowder::preprocess::{
    candidate_tiles, color_normalize, sample_dataset, PreprocessConfig, RgbImage, TileRef,
};
use chowder::synth::{generate_dataset, Regime, SynthConfig};
use chowder::train::{predict_many, train_ensemble};
use chowder::{checkpoint, io, par, Arch, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CliError, CliResult};
use crate::util::{
    create_dir, ensure_parent, load_bags, load_ensemble, load_manifest, member_path, read_config,
    sibling_config, write_config, CONFIG_FILE,
};
use crate::{
    EvaluateArgs, FoldsArgs, LocalizeArgs, PredictArgs, PreprocessArgs, SynthArgs, TrainArgs,
};

fn missing_seed(command: &str) -> CliError {
    CliError::Invalid(format!(
        "{command}: --seed is required (or a config file with a seed)"
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreprocessRun {
    input: Option<PathBuf>,
    level: u32,
    mask_downsample: u32,
    preprocess: PreprocessConfig,
}

impl Default for PreprocessRun {
    fn default() -> Self {
        Self {
            input: None,
            level: 0,
            mask_downsample: 8,
            preprocess: PreprocessConfig::default(),
        }
    }
}

fn slide_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let ext = p
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase());
            matches!(ext.as_deref(), Some("png" | "ppm" | "pnm"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Tile `(x, y)` of slide `s` is written to `<out>/<s>/<s>_x<x>_y<y>.png`.
fn tile_file(tile: &TileRef) -> PathBuf {
    Path::new(&tile.slide_id).join(format!(
        "{}_x{}_y{}.png",
        tile.slide_id, tile.grid_x, tile.grid_y
    ))
}

pub fn preprocess(a: PreprocessArgs) -> CliResult<()> {
    let mut run = match &a.config {
        Some(p) => {
            let run: PreprocessRun = read_config(p, &["preprocess"])?;
            run
        }
        None => PreprocessRun::default(),
    };
    let seed_in_file = a.config.is_some();
    if let Some(v) = a.input {
        run.input = Some(v);
    }
    if let Some(v) = a.level {
        run.level = v;
    }
    if let Some(v) = a.mask_downsample {
        run.mask_downsample = v;
    }
    let cfg = &mut run.preprocess;
    if let Some(v) = a.tile_size {
        cfg.tile_size = v;
    }
    if let Some(v) = a.min_tissue {
        cfg.min_tissue_fraction = v;
    }
    if let Some(v) = a.mtmin {
        cfg.min_sample_count = v;
    }
    match a.seed {
        Some(v) => cfg.rng_seed = v,
        None if !seed_in_file => return Err(missing_seed("preprocess")),
        None => {}
    }
    cfg.validate()?;
    if run.mask_downsample == 0 {
        return invalid("--mask-downsample must be at least 1");
    }
    let Some(input) = run.input.clone() else {
        return invalid("preprocess: --input is required");
    };

    let images = slide_images(&input)?;
    if images.is_empty() {
        return invalid(format!("{}: no PNG or PPM images", input.display()));
    }
    let cfg = &run.preprocess;
    let candidates = par::try_map(&images, |p| {
        let img = RgbImage::load(p)?;
        candidate_tiles(&stem(p), &img, run.level, run.mask_downsample, cfg)
    })?;
    let sampled = sample_dataset(&candidates, cfg)?;

    create_dir(&a.out)?;
    par::try_map_range(images.len(), |i| -> CliResult<()> {
        if sampled[i].is_empty() {
            return Ok(());
        }
        create_dir(&a.out.join(stem(&images[i])))?;
        let img = RgbImage::load(&images[i])?;
        for t in &sampled[i] {
            let ts = cfg.tile_size;
            let tile = img.crop(t.px as u32, t.py as u32, ts, ts)?;
            color_normalize(&tile).save_png(&a.out.join(tile_file(t)))?;
        }
        Ok(())
    })?;

    let mut csv = String::from("slide_id,level,grid_x,grid_y,px,py,path\n");
    for (p, tiles) in images.iter().zip(&sampled) {
        log::info!("{}: {} tiles sampled", stem(p), tiles.len());
        for t in tiles {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                t.slide_id,
                t.level,
                t.grid_x,
                t.grid_y,
                t.px,
                t.py,
                tile_file(t).display()
            );
        }
    }
    io::write_atomic_str(&a.out.join("tiles.csv"), &csv)?;
    run.input = Some(input);
    write_config(&a.out.join(CONFIG_FILE), &run)
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let regime: Option<Regime> = a.regime.as_deref().map(str::parse).transpose()?;
    let mut cfg = match &a.config {
        Some(p) => read_config::<SynthConfig>(p, &["seed"])?,
        None => {
            let seed = a.seed.ok_or_else(|| missing_seed("synth"))?;
            match regime {
                Some(Regime::Diffuse) => SynthConfig::diffuse(seed),
                _ => SynthConfig::localized(seed),
            }
        }
    };
    if let Some(r) = regime {
        cfg.regime = r;
    }
    if let Some(v) = a.slides {
        cfg.n_slides = v;
    }
    if let Some(v) = a.p {
        cfg.dim = v;
    }
    if let Some(v) = a.fraction {
        cfg.positive_tile_fraction = v;
    }
    if let Some(v) = a.shift {
        cfg.signal_shift = v;
    }
    if let Some(v) = a.min_tiles {
        cfg.min_tiles = v;
    }
    if let Some(v) = a.max_tiles {
        cfg.max_tiles = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let data = generate_dataset(&cfg)?;

    let bags_dir = a.out.join("bags");
    let truth_dir = a.out.join("truth");
    create_dir(&bags_dir)?;
    create_dir(&truth_dir)?;
    let mut entries = Vec::with_capacity(data.bags.len());
    for (bag, truth) in data.bags.iter().zip(&data.truth) {
        let rel = PathBuf::from("bags").join(format!("{}.{BAG_EXTENSION}", bag.slide_id));
        write_bag(bag, &a.out.join(&rel))?;
        io::write_atomic_str(
            &truth_dir.join(format!("{}.csv", bag.slide_id)),
            &truth.lesions(bag).to_csv(),
        )?;
        entries.push(ManifestEntry {
            slide_id: bag.slide_id.clone(),
            label: bag.label,
            path: rel,
            fold: None,
        });
    }
    Manifest::new(entries, &a.out)?.save(&a.out.join("manifest.csv"))?;
    write_config(&a.out.join(CONFIG_FILE), &cfg)
}

#[derive(Debug, Serialize)]
struct FoldsRun<'a> {
    manifest: &'a Path,
    k: usize,
    seed: u64,
}

pub fn folds(a: FoldsArgs) -> CliResult<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let mut out = make_folds(&manifest, a.k, a.seed)?;
    ensure_parent(&a.out)?;
    let out_dir = a
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    if !same_dir(out_dir, &manifest.base_dir) {
        // Relative bag paths would dangle next to the new manifest.
        for e in &mut out.entries {
            let p = manifest.base_dir.join(&e.path);
            e.path = p.canonicalize().map_err(|err| CliError::io(&p, err))?;
        }
    }
    out.save(&a.out)?;
    write_config(
        &sibling_config(&a.out),
        &FoldsRun {
            manifest: &a.manifest,
            k: a.k,
            seed: a.seed,
        },
    )
}

fn same_dir(a: &Path, b: &Path) -> bool {
    let norm = |p: &Path| {
        let p = if p.as_os_str().is_empty() {
            Path::new(".")
        } else {
            p
        };
        p.canonicalize().ok()
    };
    norm(a).is_some() && norm(a) == norm(b)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRun {
    manifest: Option<PathBuf>,
    arch: String,
    j: usize,
    r: usize,
    holdout_fold: Option<usize>,
    train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            manifest: None,
            arch: "chowder".into(),
            j: 1,
            r: 5,
            holdout_fold: None,
            train: TrainConfig::default(),
        }
    }
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut run = match &a.config {
        Some(p) => {
            let run: TrainRun = read_config(p, &["train"])?;
            let seeded = fs::read_to_string(p)
                .ok()
                .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
                .is_some_and(|v| v["train"].get("seed").is_some());
            if !seeded && a.seed.is_none() {
                return Err(missing_seed("train"));
            }
            run
        }
        None => {
            if a.seed.is_none() {
                return Err(missing_seed("train"));
            }
            TrainRun::default()
        }
    };
    if let Some(v) = a.manifest {
        run.manifest = Some(v);
    }
    if let Some(v) = a.arch {
        run.arch = v;
    }
    if let Some(v) = a.j {
        run.j = v;
    }
    if let Some(v) = a.r {
        run.r = v;
    }
    if a.holdout_fold.is_some() {
        run.holdout_fold = a.holdout_fold;
    }
    let t = &mut run.train;
    let overrides = [
        (a.lr, &mut t.learning_rate),
        (a.l2, &mut t.l2_embedding),
        (a.dropout, &mut t.dropout_rate),
    ];
    for (flag, slot) in overrides {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    for (flag, slot) in [
        (a.epochs, &mut t.epochs),
        (a.batch, &mut t.batch_size),
        (a.ensemble, &mut t.ensemble_size),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    t.validate()?;
    let arch = Arch::from_name(&run.arch, run.j, run.r)?;
    let Some(manifest_path) = run.manifest.clone() else {
        return invalid("train: --manifest is required");
    };

    let manifest = Manifest::load(&manifest_path)?;
    let manifest = match run.holdout_fold {
        Some(f) => {
            if manifest.entries.iter().any(|e| e.fold.is_none()) {
                return invalid("--holdout-fold needs a manifest with a fold column");
            }
            manifest.select_fold(Some(f), false)
        }
        None => manifest,
    };
    let bags = load_bags(&manifest, None)?;
    let refs: Vec<&FeatureBag> = bags.iter().collect();
    log::info!("training {arch} on {} slides", refs.len());
    let out = train_ensemble(&refs, &arch, &run.train)?;

    create_dir(&a.out)?;
    for (k, m) in out.ensemble.members.iter().enumerate() {
        checkpoint::save(m, &member_path(&a.out, k))?;
    }
    let mut loss = String::from("member,epoch,loss\n");
    for (k, h) in out.histories.iter().enumerate() {
        for (e, l) in h.epochs.iter().enumerate() {
            let _ = writeln!(loss, "{k},{},{l:.8}", e + 1);
        }
    }
    io::write_atomic_str(&a.out.join("loss.csv"), &loss)?;
    write_config(&a.out.join(CONFIG_FILE), &run)
}

#[derive(Debug, Serialize)]
struct PredictRun<'a> {
    model: &'a Path,
    manifest: &'a Path,
    fold: Option<usize>,
}

pub fn predict(a: PredictArgs) -> CliResult<()> {
    let ensemble = load_ensemble(&a.model)?;
    let manifest = load_manifest(&a.manifest, a.fold)?;
    let bags = load_bags(&manifest, Some(ensemble.dim()))?;
    let refs: Vec<&FeatureBag> = bags.iter().collect();
    let scores = predict_many(&ensemble, &refs)?;
    let mut csv = String::from("slide_id,score\n");
    for (b, s) in bags.iter().zip(&scores) {
        let _ = writeln!(csv, "{},{s:.6}", b.slide_id);
    }
    ensure_parent(&a.out)?;
    io::write_atomic_str(&a.out, &csv)?;
    write_config(
        &sibling_config(&a.out),
        &PredictRun {
            model: &a.model,
            manifest: &a.manifest,
            fold: a.fold,
        },
    )
}

#[derive(Debug, Serialize)]
struct LocalizeRun<'a> {
    model: &'a Path,
    manifest: &'a Path,
    fold: Option<usize>,
    tau: f64,
    kernel: usize,
    cell: u32,
}

pub fn localize(a: LocalizeArgs) -> CliResult<()> {
    let ensemble = load_ensemble(&a.model)?;
    if !ensemble.arch().uses_embeddings() {
        return invalid(format!(
            "{} has no tile embeddings to localize",
            ensemble.arch()
        ));
    }
    let manifest = load_manifest(&a.manifest, a.fold)?;
    let bags = load_bags(&manifest, Some(ensemble.dim()))?;
    create_dir(&a.out)?;
    par::try_map(&bags, |bag| -> CliResult<()> {
        let scores = ensemble.tile_scores(bag, a.kernel)?;
        let tiles = bag.tiles.iter().map(|t| (t.grid_x, t.grid_y)).collect();
        let map = LocalizationMap::new(bag.slide_id.clone(), tiles, scores, a.tau)?;
        io::write_atomic_str(&a.out.join(format!("{}.csv", bag.slide_id)), &map.to_csv())?;
        map.render(a.cell)?
            .save_png(&a.out.join(format!("{}.png", bag.slide_id)))?;
        Ok(())
    })?;
    write_config(
        &a.out.join(CONFIG_FILE),
        &LocalizeRun {
            model: &a.model,
            manifest: &a.manifest,
            fold: a.fold,
            tau: a.tau,
            kernel: a.kernel,
            cell: a.cell,
        },
    )
}

#[derive(Debug, Serialize)]
struct EvaluateRun<'a> {
    pred: &'a Path,
    manifest: &'a Path,
    maps: Option<&'a Path>,
    truth: Option<&'a Path>,
    tau: f64,
    fp_rates: &'static [f64],
}

impl<'a> From<&'a EvaluateArgs> for EvaluateRun<'a> {
    fn from(a: &'a EvaluateArgs) -> Self {
        Self {
            pred: &a.pred,
            manifest: &a.manifest,
            maps: a.maps.as_deref(),
            truth: a.truth.as_deref(),
            tau: DEFAULT_TAU,
            fp_rates: &FROC_FP_RATES,
        }
    }
}

fn read_scores(path: &Path) -> CliResult<Vec<(String, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("slide_id,score") {
        return invalid(format!("{}: header must be slide_id,score", path.display()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = || {
                CliError::Invalid(format!(
                    "{}:{}: malformed row `{line}`",
                    path.display(),
                    i + 2
                ))
            };
            let (id, s) = line.rsplit_once(',').ok_or_else(bad)?;
            let score: f64 = s.trim().parse().map_err(|_| bad())?;
            if score.is_nan() {
                return Err(bad());
            }
            Ok((id.to_owned(), score))
        })
        .collect()
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let labels: HashMap<&str, Option<u8>> = manifest
        .entries
        .iter()
        .map(|e| (e.slide_id.as_str(), e.label))
        .collect();
    let preds = read_scores(&a.pred)?;
    let mut scores = Vec::with_capacity(preds.len());
    let mut ys = Vec::with_capacity(preds.len());
    for (id, s) in &preds {
        match labels.get(id.as_str()) {
            Some(Some(y)) => {
                scores.push(*s);
                ys.push(*y);
            }
            Some(None) => return invalid(format!("slide {id} has no label in the manifest")),
            None => return invalid(format!("slide {id} is not in the manifest")),
        }
    }
    println!("auc,{:.4}", roc_auc(&scores, &ys)?);
    if let Some(path) = &a.roc {
        ensure_parent(path)?;
        io::write_atomic_str(path, &roc_csv(&roc_curve(&scores, &ys)?))?;
        write_config(&sibling_config(path), &EvaluateRun::from(&a))?;
    }

    if let (Some(maps_dir), Some(truth_dir)) = (&a.maps, &a.truth) {
        let mut maps = Vec::new();
        let mut truth = Vec::new();
        for (id, _) in &preds {
            maps.push(LocalizationMap::load(
                &maps_dir.join(format!("{id}.csv")),
                id,
                DEFAULT_TAU,
            )?);
            truth.push(LesionGroundTruth::load(
                &truth_dir.join(format!("{id}.csv")),
                id,
            )?);
        }
        let result = froc(&maps, &truth, &FROC_FP_RATES)?;
        println!("froc,{:.4}", result.score);
        if let Some(path) = &a.froc {
            ensure_parent(path)?;
            io::write_atomic_str(path, &froc_csv(&result.curve))?;
            write_config(&sibling_config(path), &EvaluateRun::from(&a))?;
        }
    }
    Ok(())
}
