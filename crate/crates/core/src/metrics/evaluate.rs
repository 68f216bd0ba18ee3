use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::features::{VideoExtractor, EXTRACTOR_SEED};
use super::mmd::kernel_distance;
use super::stats::{frechet_distance, gaussian_stats};
use super::EvalError;
use crate::lfae::{perceptual_loss, PerceptualNet};
use crate::pipeline::checkpoint::{load_checkpoint, save_checkpoint};
use crate::tensor::{Array, Binding, ParamStore};
use crate::worldsim::dataset::read_frames;
use crate::worldsim::parallel_map;

/// Perceptual distance between frames through the stage-1 fixed random
/// feature net (seed-pinned, identical in every process).
pub struct PerceptualMeter {
    params: ParamStore<f32>,
    net: PerceptualNet,
}

impl Default for PerceptualMeter {
    fn default() -> Self {
        Self::new()
    }
}

impl PerceptualMeter {
    pub fn new() -> Self {
        let mut params: ParamStore<f32> = ParamStore::new();
        let net = PerceptualNet::init(&mut params);
        PerceptualMeter { params, net }
    }

    pub fn distance(&self, a: &Array<f32>, b: &Array<f32>) -> f64 {
        assert_eq!(a.shape, b.shape, "perceptual_distance shape mismatch");
        let mut bind = Binding::new_inference(&self.params);
        let av = bind.tape.constant(a.clone());
        let bv = bind.tape.constant(b.clone());
        let d = perceptual_loss(&mut bind, &self.net, av, bv);
        bind.tape.value(d) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub lpips_surr: f64,
    pub fvd: f64,
    pub kvd: f64,
    pub clips: usize,
}

/// CSV with the fixed header plus a footer note: the extractor is a
/// fixed random net, so values compare only within this repository.
pub fn report_csv(r: &Report) -> String {
    format!(
        "lpips_surr,fvd,kvd\n{:.6},{:.6},{:.6}\n# fixed random feature extractor (seed {}): values comparable only within this repository\n",
        r.lpips_surr, r.fvd, r.kvd, EXTRACTOR_SEED
    )
}

/// Clip ids = subdirectory names; frames live either directly in the
/// clip directory or under an `exo/` subdirectory (dataset layout).
fn clip_dirs(root: &Path) -> Result<BTreeMap<String, PathBuf>, EvalError> {
    let mut out = BTreeMap::new();
    let rd = std::fs::read_dir(root).map_err(|e| EvalError::Io {
        path: root.display().to_string(),
        source: e,
    })?;
    for entry in rd {
        let entry = entry.map_err(|e| EvalError::Io { path: root.display().to_string(), source: e })?;
        if entry.file_type().map(|t| t.is_dir()).unwrap_or(false) {
            let name = entry.file_name().to_string_lossy().into_owned();
            let sub = entry.path().join("exo");
            out.insert(name, if sub.is_dir() { sub } else { entry.path() });
        }
    }
    Ok(out)
}

fn load_features(
    dirs: &BTreeMap<String, PathBuf>,
    extractor: &VideoExtractor,
    cache_root: &Path,
) -> Result<Vec<Vec<f32>>, EvalError> {
    // feature cache keyed by the extractor seed
    let cache_path = cache_root.join(format!("features_{:x}_{}.ckpt", EXTRACTOR_SEED, extractor.frames));
    if let Ok((store, meta)) = load_checkpoint(&cache_path) {
        if meta.get("clips").copied() == Some(dirs.len() as f64) {
            let mut rows = Vec::with_capacity(dirs.len());
            let mut ok = true;
            for (i, _) in dirs.iter().enumerate() {
                let name = format!("feat.{i:05}");
                if store.contains(&name) {
                    rows.push(store.get(&name).data.clone());
                } else {
                    ok = false;
                    break;
                }
            }
            if ok {
                return Ok(rows);
            }
        }
    }
    let paths: Vec<&PathBuf> = dirs.values().collect();
    let results = parallel_map(paths.len(), |i| -> Result<Vec<f32>, EvalError> {
        let frames = read_frames(paths[i])?;
        extractor.extract(&frames)
    });
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    let mut store: ParamStore<f32> = ParamStore::new();
    for (i, row) in rows.iter().enumerate() {
        store.insert(&format!("feat.{i:05}"), Array::from_vec(vec![row.len()], row.clone()));
    }
    let mut meta = BTreeMap::new();
    meta.insert("clips".to_string(), dirs.len() as f64);
    let _ = save_checkpoint(&cache_path, &store, &meta);
    Ok(rows)
}

/// Per-clip perceptual distance against the ground-truth exo frames
/// plus corpus-level Fréchet and kernel distances of video features.
pub fn evaluate(gen_root: &Path, ref_root: &Path, frames: usize) -> Result<Report, EvalError> {
    let gen_dirs = clip_dirs(gen_root)?;
    let ref_dirs_all = clip_dirs(ref_root)?;
    let missing_in_ref: Vec<String> =
        gen_dirs.keys().filter(|k| !ref_dirs_all.contains_key(*k)).cloned().collect();
    let missing_in_gen: Vec<String> =
        ref_dirs_all.keys().filter(|k| !gen_dirs.contains_key(*k)).cloned().collect();
    // generation may cover a subset of the reference corpus; ids present
    // in gen but absent in ref are unmatchable and fatal
    if !missing_in_ref.is_empty() {
        return Err(EvalError::IdMismatch { missing_in_gen, missing_in_ref });
    }
    if gen_dirs.is_empty() {
        return Err(EvalError::TooFewClips(0));
    }
    let ref_dirs: BTreeMap<String, PathBuf> = ref_dirs_all
        .iter()
        .filter(|(k, _)| gen_dirs.contains_key(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();

    let meter = PerceptualMeter::new();
    let ids: Vec<&String> = gen_dirs.keys().collect();
    let lpips_rows = parallel_map(ids.len(), |i| -> Result<f64, EvalError> {
        let g = read_frames(&gen_dirs[ids[i]])?;
        let r = read_frames(&ref_dirs[ids[i]])?;
        if g.len() != r.len() {
            return Err(EvalError::FrameCount { expected: r.len(), got: g.len() });
        }
        let mut acc = 0.0;
        for (a, b) in g.iter().zip(r.iter()) {
            acc += meter.distance(a, b);
        }
        Ok(acc / g.len() as f64)
    });
    let mut lpips = 0.0;
    for r in lpips_rows {
        lpips += r?;
    }
    lpips /= ids.len() as f64;

    let extractor = VideoExtractor::new(frames);
    let gen_feats = load_features(&gen_dirs, &extractor, gen_root)?;
    let ref_feats = load_features(&ref_dirs, &extractor, ref_root)?;
    let fvd = frechet_distance(&gaussian_stats(&gen_feats)?, &gaussian_stats(&ref_feats)?)?;
    let kvd = kernel_distance(&gen_feats, &ref_feats)?;
    Ok(Report { lpips_surr: lpips, fvd, kvd, clips: ids.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use crate::worldsim::dataset::write_frames;

    fn write_clip(root: &Path, id: &str, seed: u64, frames: usize) {
        let mut rng = Rng::from_seed(seed);
        let fs: Vec<Array<f32>> = (0..frames)
            .map(|_| {
                Array::from_vec(vec![3, 32, 32], rng.uniform_vec(3 * 32 * 32, 0.0, 1.0))
                    .map(|v: f32| (v * 255.0).round() / 255.0)
            })
            .collect();
        write_frames(&root.join(id), &fs).unwrap();
    }

    #[test]
    fn self_evaluation_is_zero_lpips_near_zero_fvd() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            write_clip(dir.path(), &format!("clip_{i:04}"), i as u64, 4);
        }
        let r = evaluate(dir.path(), dir.path(), 4).unwrap();
        assert_eq!(r.lpips_surr, 0.0);
        assert!(r.fvd.abs() < 1e-6, "fvd {}", r.fvd);
        // identical corpora: the unbiased estimator carries a small
        // negative O(1/m) term; "within noise" is the contract
        assert!(r.kvd.abs() < 0.01, "kvd {}", r.kvd);
    }

    #[test]
    fn csv_is_byte_stable_and_has_fixed_columns() {
        let r = Report { lpips_surr: 0.012345, fvd: 1.5, kvd: -0.001, clips: 3 };
        let a = report_csv(&r);
        let b = report_csv(&r);
        assert_eq!(a, b);
        assert!(a.starts_with("lpips_surr,fvd,kvd\n"));
    }

    #[test]
    fn id_mismatch_is_listed_explicitly() {
        let gen = tempfile::tempdir().unwrap();
        let refr = tempfile::tempdir().unwrap();
        write_clip(gen.path(), "clip_0000", 1, 3);
        write_clip(gen.path(), "clip_0007", 2, 3);
        write_clip(refr.path(), "clip_0000", 1, 3);
        match evaluate(gen.path(), refr.path(), 3) {
            Err(EvalError::IdMismatch { missing_in_ref, .. }) => {
                assert_eq!(missing_in_ref, vec!["clip_0007".to_string()]);
            }
            other => panic!("expected id mismatch, got {other:?}"),
        }
    }

    #[test]
    fn perceptual_meter_monotone_under_noise() {
        let meter = PerceptualMeter::new();
        let mut rng = Rng::from_seed(5);
        let base = Array::from_vec(vec![3, 32, 32], rng.uniform_vec(3 * 32 * 32, 0.2, 0.8));
        let mut prev = 0.0;
        for sigma in [0.0, 0.05, 0.15, 0.4] {
            let mut acc = 0.0;
            for _ in 0..20 {
                let noisy = Array::from_vec(
                    vec![3, 32, 32],
                    base.data.iter().map(|&v| v + (rng.normal() as f32) * sigma).collect(),
                );
                acc += meter.distance(&base, &noisy);
            }
            acc /= 20.0;
            assert!(acc >= prev, "distance must be nondecreasing in noise: {acc} < {prev}");
            prev = acc;
        }
    }
}
