//! Deterministic multi-modality phantom generator.
//!
//! Each phantom is a brain-like ellipsoid with zero background and a number
//! of nested ellipsoidal lesions (edema ⊃ core ⊃ enhancing). The pre-contrast
//! channels draw the necrotic and enhancing classes from the same intensity
//! distribution; only the contrast channel separates them, by `contrast_gap`.
//! That asymmetry is the whole point: a network without the contrast channel
//! cannot read the enhancing class off intensities and must learn structure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::cases::{save_case, Manifest, Split};
use crate::rng::{self, StreamDomain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volumes::{MultiModalVolume, SegmentationMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    /// Spatial dims; rank 2 or 3.
    pub dims: Vec<usize>,
    /// Number of pre-contrast channels (>= 2).
    pub num_modalities_pre: usize,
    /// Additive Gaussian noise inside the brain.
    pub noise_std: f64,
    /// Inclusive range of lesion counts per case.
    pub lesion_count_range: [usize; 2],
    /// Strictly decreasing ellipsoid radii: edema, core, enhancing (voxels).
    pub nesting_radii: [f64; 3],
    /// Intensity separation of enhancing vs necrotic, contrast channel only.
    pub contrast_gap: f64,
    /// Per-lesion isotropic radius scale range: all three shells of one
    /// lesion scale together, so enhancing extent follows lesion size (a
    /// multi-scale geometric cue) while local intensities stay uninformative.
    pub radius_scale_range: [f64; 2],
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: vec![32, 32, 32],
            num_modalities_pre: 3,
            noise_std: 0.15,
            lesion_count_range: [1, 2],
            nesting_radii: [9.0, 6.0, 3.5],
            contrast_gap: 1.0,
            radius_scale_range: [0.8, 1.2],
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() != 2 && self.dims.len() != 3 {
            return Err(Error::Config(format!(
                "phantom dims must have rank 2 or 3, got {:?}",
                self.dims
            )));
        }
        if self.num_modalities_pre < 2 {
            return Err(Error::Config(
                "num_modalities_pre must be >= 2".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        let [e, c, h] = self.nesting_radii;
        if !(e > c && c > h && h > 0.0) {
            return Err(Error::Config(format!(
                "nesting_radii must be strictly decreasing positive, got {:?}",
                self.nesting_radii
            )));
        }
        if self.lesion_count_range[0] > self.lesion_count_range[1] {
            return Err(Error::Config("lesion_count_range is inverted".into()));
        }
        if self.contrast_gap <= 3.0 * self.noise_std {
            return Err(Error::Config(format!(
                "contrast_gap {} must exceed 3 * noise_std = {}",
                self.contrast_gap,
                3.0 * self.noise_std
            )));
        }
        let [lo, hi] = self.radius_scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "radius_scale_range must be positive and ordered, got {:?}",
                self.radius_scale_range
            )));
        }
        // The largest possible lesion must fit inside the brain ellipsoid.
        let brain = self.brain_semi_axes();
        if brain.iter().any(|&s| s <= e * hi) {
            return Err(Error::Config(format!(
                "dims {:?} too small for max edema radius {} (brain semi-axes {:?})",
                self.dims,
                e * hi,
                brain
            )));
        }
        Ok(())
    }

    /// Pre-contrast modality names, then the contrast modality last.
    pub fn modality_names(&self) -> Vec<String> {
        let mut names = self.pre_modality_names();
        names.push(CONTRAST_MODALITY.to_string());
        names
    }

    pub fn pre_modality_names(&self) -> Vec<String> {
        const CANON: [&str; 3] = ["t1", "t2", "flair"];
        (0..self.num_modalities_pre)
            .map(|i| {
                CANON
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("pre{i}"))
            })
            .collect()
    }

    fn brain_semi_axes(&self) -> Vec<f64> {
        self.dims.iter().map(|&d| 0.42 * d as f64).collect()
    }
}

pub const CONTRAST_MODALITY: &str = "t1ce";

/// Geometry of one generated lesion: three nested balls [edema, core,
/// enhancing]. The core is displaced inside the edema along the lesion's
/// direction, and the enhancing ball further along the same direction inside
/// the core, so the enhancing location is determined by lesion-scale shape
/// (the edema-to-core displacement) and never by local intensity.
#[derive(Debug, Clone)]
pub struct Lesion {
    /// Shell centers: [edema, core, enhancing].
    pub centers: [Vec<f64>; 3],
    /// Shell radii: [edema, core, enhancing].
    pub radii: [f64; 3],
}

/// Core offset as a fraction of (edema radius - core radius); the matching
/// fraction for the enhancing shell. Chosen < 1 so nesting is guaranteed for
/// every valid radius triple.
const CORE_OFFSET_FRACTION: f64 = 0.95;
const ENHANCING_OFFSET_FRACTION: f64 = 0.9;

impl Lesion {
    pub fn inside(&self, shell: usize, pos: &[usize]) -> bool {
        let r = self.radii[shell];
        let mut acc = 0.0;
        for (p, c) in pos.iter().zip(&self.centers[shell]) {
            let d = (*p as f64 - c) / r;
            acc += d * d;
        }
        acc <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct PhantomGeometry {
    pub brain_center: Vec<f64>,
    pub brain_semi_axes: Vec<f64>,
    pub lesions: Vec<Lesion>,
}

// Tissue intensity model, shared by all generated cases.
const BRAIN_BASE_STEP: f64 = 0.15;
const EDEMA_DELTA: f64 = 0.9;
const CORE_DELTA: f64 = 1.8;

fn brain_base(modality_index: usize) -> f64 {
    1.0 + BRAIN_BASE_STEP * modality_index as f64
}

/// Generate one phantom case: modality channels (pre + contrast) and labels.
pub fn generate_phantom<T: Scalar>(
    cfg: &PhantomConfig,
    case_index: u64,
) -> Result<(MultiModalVolume<T>, SegmentationMap)> {
    let (vol, seg, _) = generate_phantom_with_geometry(cfg, case_index)?;
    Ok((vol, seg))
}

/// As [`generate_phantom`], also returning the lesion geometry so tests can
/// check nesting and expected label volumes against the ellipsoid oracle.
pub fn generate_phantom_with_geometry<T: Scalar>(
    cfg: &PhantomConfig,
    case_index: u64,
) -> Result<(MultiModalVolume<T>, SegmentationMap, PhantomGeometry)> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, StreamDomain::Phantom, case_index, 0);
    let dims = &cfg.dims;
    let rank = dims.len();
    let n: usize = dims.iter().product();

    let brain_center: Vec<f64> = dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
    let brain_semi = cfg.brain_semi_axes();

    // Brain mask: ellipsoid membership test per voxel.
    let mut brain = vec![false; n];
    let mut pos = vec![0usize; rank];
    for (flat, b) in brain.iter_mut().enumerate() {
        unflatten(flat, dims, &mut pos);
        let mut acc = 0.0;
        for a in 0..rank {
            let d = (pos[a] as f64 - brain_center[a]) / brain_semi[a];
            acc += d * d;
        }
        *b = acc <= 1.0;
    }

    // Lesion centers: rejection-sample inside the shrunken brain ellipsoid so
    // the edema shell stays within the brain.
    let count = rng::uniform_usize(&mut rng, cfg.lesion_count_range[0], cfg.lesion_count_range[1]);
    let mut lesions = Vec::with_capacity(count);
    for _ in 0..count {
        let [lo, hi] = cfg.radius_scale_range;
        let scale = lo + rand::Rng::random::<f64>(&mut rng) * (hi - lo);
        let radii = [
            cfg.nesting_radii[0] * scale,
            cfg.nesting_radii[1] * scale,
            cfg.nesting_radii[2] * scale,
        ];
        let margin: Vec<f64> = brain_semi.iter().map(|&s| s - radii[0]).collect();
        // Rejection-sample a center inside the shrunken brain that keeps
        // this edema ball disjoint from every earlier lesion; give up after
        // a bounded number of draws (the case then has fewer lesions).
        let mut center = vec![0.0; rank];
        let mut placed = false;
        for _attempt in 0..256 {
            let mut acc = 0.0;
            for a in 0..rank {
                let u: f64 = rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0;
                center[a] = brain_center[a] + u * margin[a];
                acc += ((center[a] - brain_center[a]) / margin[a]).powi(2);
            }
            if acc > 1.0 {
                continue;
            }
            let disjoint = lesions.iter().all(|l: &Lesion| {
                let dist2: f64 = center
                    .iter()
                    .zip(&l.centers[0])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let min_sep = radii[0] + l.radii[0] + 1.0;
                dist2 > min_sep * min_sep
            });
            if disjoint {
                placed = true;
                break;
            }
        }
        if !placed {
            continue;
        }
        // Random unit direction for the intra-lesion displacements.
        let mut direction = vec![0.0; rank];
        loop {
            let mut norm = 0.0;
            for d in direction.iter_mut() {
                *d = rng::normal_f64(&mut rng);
                norm += *d * *d;
            }
            let norm = norm.sqrt();
            if norm > 1e-6 {
                for d in direction.iter_mut() {
                    *d /= norm;
                }
                break;
            }
        }
        let core_offset = CORE_OFFSET_FRACTION * (radii[0] - radii[1]);
        let enh_offset = ENHANCING_OFFSET_FRACTION * (radii[1] - radii[2]);
        let core_center: Vec<f64> = center
            .iter()
            .zip(&direction)
            .map(|(c, d)| c + core_offset * d)
            .collect();
        let enh_center: Vec<f64> = core_center
            .iter()
            .zip(&direction)
            .map(|(c, d)| c + enh_offset * d)
            .collect();
        lesions.push(Lesion {
            centers: [center, core_center, enh_center],
            radii,
        });
    }

    // Paint labels with priority enhancing > core > edema so overlapping
    // lesions still nest.
    let mut labels = vec![0u8; n];
    paint_shell(&mut labels, dims, &lesions, 0, 2);
    paint_shell(&mut labels, dims, &lesions, 1, 1);
    paint_shell(&mut labels, dims, &lesions, 2, 3);
    // Lesions exist only inside the brain (guaranteed by construction, but
    // clip anyway for odd configs).
    for (l, &b) in labels.iter_mut().zip(&brain) {
        if !b {
            *l = 0;
        }
    }

    // Intensities: base + class delta + noise inside the brain; 0 outside.
    let num_channels = cfg.num_modalities_pre + 1;
    let contrast_index = cfg.num_modalities_pre;
    let names = cfg.modality_names();
    let mut channels: Vec<Vec<T>> = (0..num_channels).map(|_| vec![T::zero(); n]).collect();
    for flat in 0..n {
        if !brain[flat] {
            continue;
        }
        let label = labels[flat];
        for (m, channel) in channels.iter_mut().enumerate() {
            let mut v = brain_base(m);
            v += match label {
                2 => EDEMA_DELTA,
                1 | 3 => CORE_DELTA,
                _ => 0.0,
            };
            if m == contrast_index && label == 3 {
                v += cfg.contrast_gap;
            }
            v += cfg.noise_std * rng::normal_f64(&mut rng);
            channel[flat] = T::from_f64(v);
        }
    }

    let channels: Vec<(String, Tensor<T>)> = names
        .into_iter()
        .zip(channels)
        .map(|(name, data)| (name, Tensor::from_vec(dims, data).expect("sized")))
        .collect();
    let vol = MultiModalVolume::new(channels)?;
    let seg = SegmentationMap::new(Tensor::from_vec(dims, labels)?)?;
    let geometry = PhantomGeometry {
        brain_center,
        brain_semi_axes: brain_semi,
        lesions,
    };
    Ok((vol, seg, geometry))
}

fn paint_shell(labels: &mut [u8], dims: &[usize], lesions: &[Lesion], shell: usize, label: u8) {
    let rank = dims.len();
    let mut pos = vec![0usize; rank];
    for (flat, l) in labels.iter_mut().enumerate() {
        unflatten(flat, dims, &mut pos);
        if lesions.iter().any(|les| les.inside(shell, &pos)) {
            *l = label;
        }
    }
}

fn unflatten(mut flat: usize, dims: &[usize], pos: &mut [usize]) {
    for a in (0..dims.len()).rev() {
        pos[a] = flat % dims[a];
        flat /= dims[a];
    }
}

/// Voxel count of a discretized ellipsoid with the given radii placed at a
/// voxel-center position; the oracle the label-frequency tests compare
/// against.
pub fn ellipsoid_voxel_count(dims: &[usize], center: &[f64], radius: f64) -> usize {
    let rank = dims.len();
    let mut pos = vec![0usize; rank];
    let n: usize = dims.iter().product();
    let mut count = 0usize;
    for flat in 0..n {
        unflatten(flat, dims, &mut pos);
        let mut acc = 0.0;
        for a in 0..rank {
            let d = (pos[a] as f64 - center[a]) / radius;
            acc += d * d;
        }
        if acc <= 1.0 {
            count += 1;
        }
    }
    count
}

/// Split fractions; must sum to 1 and give every split at least one case.
pub fn split_counts(n_cases: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (ft, fv, fe) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fe > 0.0) || ((ft + fv + fe) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    // Largest-remainder apportionment.
    let raw = [ft * n_cases as f64, fv * n_cases as f64, fe * n_cases as f64];
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rem: Vec<(usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r - r.floor()))
        .collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut missing = n_cases - counts.iter().sum::<usize>();
    for (i, _) in rem {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Config(format!(
            "split {fractions:?} of {n_cases} cases leaves an empty split ({counts:?})"
        )));
    }
    Ok((counts[0], counts[1], counts[2]))
}

/// Generate `n_cases` phantoms under `out_dir` with a split manifest.
pub fn generate_dataset<T: Scalar>(
    cfg: &PhantomConfig,
    n_cases: usize,
    fractions: (f64, f64, f64),
    out_dir: &std::path::Path,
) -> Result<Manifest> {
    cfg.validate()?;
    let (n_train, n_val, _n_test) = split_counts(n_cases, fractions)?;
    std::fs::create_dir_all(out_dir)?;

    use rayon::prelude::*;
    let results: Vec<Result<String>> = (0..n_cases)
        .into_par_iter()
        .map(|i| {
            let case_id = format!("case_{i:04}");
            let (vol, seg) = generate_phantom::<T>(cfg, i as u64)?;
            save_case(&out_dir.join(&case_id), &vol, Some(&seg))?;
            Ok(case_id)
        })
        .collect();

    let mut cases = std::collections::BTreeMap::new();
    for (i, r) in results.into_iter().enumerate() {
        let case_id = r?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        cases.insert(case_id, split);
    }
    let manifest = Manifest {
        seed: cfg.seed,
        cases,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}
