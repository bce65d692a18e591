//! Paired primary/auxiliary scene generation with exact change ground
//! truth.
//!
//! The primary modality is a smooth bright background with dark tree
//! blobs; the auxiliary modality is a height-like map of the tree label
//! plus noise. Inside the injected change cells the auxiliary content is
//! made label-inconsistent (trees removed on the auxiliary side only), so
//! uncertainty detection has measurable ground truth without human labels.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gma;
use crate::mtf;
use crate::patch::PatchGrid;
use crate::pgm;
use crate::rng::StreamKey;
use crate::tensor::Tensor;

pub const GROUND_HEIGHT: f32 = 0.2;
pub const TREE_HEIGHT_SPAN: f32 = 0.6;
/// A grid cell is eligible for change injection when at least this
/// fraction of its pixels is tree.
pub const CHANGE_MIN_COVERAGE: f32 = 0.5;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub patch: usize,
    pub tree_blobs: usize,
    pub radius_min: f32,
    pub radius_max: f32,
    pub change_patches: usize,
    pub change_magnitude: f32,
    pub noise_sigma: f32,
    /// Multiplicative SAR-style speckle instead of additive noise.
    pub speckle: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 64,
            patch: 4,
            tree_blobs: 7,
            radius_min: 5.0,
            radius_max: 11.0,
            change_patches: 20,
            change_magnitude: TREE_HEIGHT_SPAN,
            noise_sigma: 0.02,
            speckle: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SceneSample {
    pub primary: Tensor,
    pub auxiliary: Tensor,
    pub label: Tensor,
    pub edge: Tensor,
    pub changed_cells: Vec<usize>,
}

/// Height-like auxiliary content implied by a tree label.
pub fn height_map(label: &Tensor) -> Tensor {
    let data = label
        .data()
        .iter()
        .map(|&l| GROUND_HEIGHT + TREE_HEIGHT_SPAN * l)
        .collect();
    Tensor::from_parts(label.shape().to_vec(), data)
}

/// Binary morphological gradient: 3x3 dilation minus 3x3 erosion.
pub fn morph_gradient(label: &Tensor) -> Tensor {
    let (h, w) = (label.shape()[1], label.shape()[2]);
    let at = |y: isize, x: isize| -> f32 {
        if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
            // Outside the frame counts as background for both operators.
            0.0
        } else {
            label.data()[y as usize * w + x as usize]
        }
    };
    let mut data = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut dil = 0.0f32;
            let mut ero = 1.0f32;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let v = at(y + dy, x + dx);
                    dil = dil.max(v);
                    ero = ero.min(v);
                }
            }
            data[y as usize * w + x as usize] = dil - ero;
        }
    }
    Tensor::from_parts(vec![1, h, w], data)
}

/// Fully deterministic scene construction from (spec.seed, sample_id).
pub fn generate_scene(spec: &SceneSpec, sample_id: u64) -> Result<SceneSample> {
    let n = spec.size;
    let grid = PatchGrid::new(n, n, spec.patch)?;
    if spec.change_patches > grid.len() {
        return Err(Error::invalid(format!(
            "change_patches {} exceeds the {} grid cells",
            spec.change_patches,
            grid.len()
        )));
    }
    if spec.radius_min <= 0.0 || spec.radius_max < spec.radius_min {
        return Err(Error::invalid("radius range must satisfy 0 < min <= max"));
    }
    let key = StreamKey::new(spec.seed).with_str("scene").with(sample_id);

    // Tree label: union of random disks.
    let blobs = key.with_str("blobs");
    let mut label = vec![0.0f32; n * n];
    for b in 0..spec.tree_blobs {
        let cx = blobs.uniform_in(3 * b as u64, 0.0, n as f64);
        let cy = blobs.uniform_in(3 * b as u64 + 1, 0.0, n as f64);
        let r = blobs.uniform_in(3 * b as u64 + 2, f64::from(spec.radius_min), f64::from(spec.radius_max));
        let r2 = r * r;
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                if d2 <= r2 {
                    label[y * n + x] = 1.0;
                }
            }
        }
    }
    let label = Tensor::from_parts(vec![1, n, n], label);
    let edge = morph_gradient(&label);

    // Primary: smooth low-frequency background, darker trees, light noise.
    let bg = key.with_str("background");
    let pnoise = key.with_str("primary_noise");
    let mut primary = vec![0.0f32; 3 * n * n];
    for ch in 0..3 {
        let ax = bg.uniform_in(4 * ch as u64, 0.02, 0.08);
        let ay = bg.uniform_in(4 * ch as u64 + 1, 0.02, 0.08);
        let phase = bg.uniform_in(4 * ch as u64 + 2, 0.0, std::f64::consts::TAU);
        let tree_tone = bg.uniform_in(4 * ch as u64 + 3, 0.18, 0.30) as f32;
        for y in 0..n {
            for x in 0..n {
                let wave = (ax * x as f64 + ay * y as f64 + phase).sin();
                let back = (0.62 + 0.18 * wave) as f32;
                let l = label.data()[y * n + x];
                let noise = pnoise.normal_at((ch * n * n + y * n + x) as u64) as f32;
                let v = back * (1.0 - l) + tree_tone * l + 0.015 * noise;
                primary[(ch * n + y) * n + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let primary = Tensor::from_parts(vec![3, n, n], primary);

    // Change cells: among cells with enough tree coverage, pick M by a
    // seeded shuffle.
    let p2 = (spec.patch * spec.patch) as f32;
    let mut eligible = Vec::new();
    for i in 0..grid.len() {
        let (row, col) = grid.cell(i);
        let mut cover = 0.0f32;
        for py in 0..spec.patch {
            let y = row * spec.patch + py;
            for px in 0..spec.patch {
                cover += label.data()[y * n + col * spec.patch + px];
            }
        }
        if cover / p2 >= CHANGE_MIN_COVERAGE {
            eligible.push(i);
        }
    }
    if eligible.len() < spec.change_patches {
        return Err(Error::invalid(format!(
            "only {} grid cells reach tree coverage {CHANGE_MIN_COVERAGE}, \
             cannot inject {} changes; raise tree density or lower change_patches",
            eligible.len(),
            spec.change_patches
        )));
    }
    let perm = key.with_str("change_cells").permutation(eligible.len());
    let mut changed_cells: Vec<usize> = perm[..spec.change_patches].iter().map(|&j| eligible[j]).collect();
    changed_cells.sort_unstable();

    // Auxiliary: height of the label plus noise; inside changed cells the
    // tree height is removed (auxiliary-only change).
    let mut in_change = vec![false; n * n];
    for &i in &changed_cells {
        let (row, col) = grid.cell(i);
        for py in 0..spec.patch {
            let y = row * spec.patch + py;
            for px in 0..spec.patch {
                in_change[y * n + col * spec.patch + px] = true;
            }
        }
    }
    let anoise = key.with_str("aux_noise");
    let mut aux = vec![0.0f32; n * n];
    for p in 0..n * n {
        let l = label.data()[p];
        let mut v = GROUND_HEIGHT + TREE_HEIGHT_SPAN * l;
        if in_change[p] {
            v -= spec.change_magnitude * l;
        }
        let z = anoise.normal_at(p as u64) as f32;
        aux[p] = if spec.speckle {
            v * (1.0 + spec.noise_sigma * z)
        } else {
            v + spec.noise_sigma * z
        };
    }
    let auxiliary = Tensor::from_parts(vec![1, n, n], aux);

    Ok(SceneSample {
        primary,
        auxiliary,
        label,
        edge,
        changed_cells,
    })
}

// ---- dataset on disk -------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub split: String,
    pub primary_path: String,
    pub auxiliary_path: String,
    pub label_path: String,
    pub edge_path: String,
    pub changed_cells: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// Split sizes: floor for train and val, remainder to test. The ratios
/// must sum to 1.
pub fn split_sizes(count: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (rt, rv, rs) = ratios;
    if (rt + rv + rs - 1.0).abs() > 1e-9 || rt < 0.0 || rv < 0.0 || rs < 0.0 {
        return Err(Error::invalid(format!("split ratios must be nonnegative and sum to 1, got {ratios:?}")));
    }
    let train = (rt * count as f64).floor() as usize;
    let val = (rv * count as f64).floor() as usize;
    Ok((train, val, count - train - val))
}

/// Generate `count` scenes, assign splits by a seeded shuffle, and write
/// everything (MTF1 tensors, PGM previews, JSONL manifest) under `dir`.
pub fn write_dataset(
    dir: &Path,
    spec: &SceneSpec,
    count: usize,
    ratios: (f64, f64, f64),
) -> Result<Vec<ManifestRecord>> {
    let (n_train, n_val, _) = split_sizes(count, ratios)?;
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir)?;

    let scenes = crate::parallel::par_map_indices(count, |i| generate_scene(spec, i as u64));

    let perm = StreamKey::new(spec.seed).with_str("split").permutation(count);
    let mut split_of = vec![Split::Test; count];
    for (rank, &i) in perm.iter().enumerate() {
        split_of[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut records = Vec::with_capacity(count);
    for (i, scene) in scenes.into_iter().enumerate() {
        let scene = scene?;
        let stem = format!("{i:04}");
        let rel = |suffix: &str| format!("samples/{stem}_{suffix}.mtf");
        let write = |suffix: &str, t: &Tensor| -> Result<()> {
            mtf::save_tensor(&samples_dir.join(format!("{stem}_{suffix}.mtf")), t)
        };
        write("primary", &scene.primary)?;
        write("aux", &scene.auxiliary)?;
        write("label", &scene.label)?;
        write("edge", &scene.edge)?;
        let lum = gma::luminance(&scene.primary)?;
        let side = spec.size;
        pgm::write_heatmap(&samples_dir.join(format!("{stem}_primary.pgm")), side, side, lum.data())?;
        pgm::write_heatmap(&samples_dir.join(format!("{stem}_aux.pgm")), side, side, scene.auxiliary.data())?;
        pgm::write_heatmap(&samples_dir.join(format!("{stem}_label.pgm")), side, side, scene.label.data())?;
        records.push(ManifestRecord {
            id: i as u64,
            split: split_of[i].as_str().to_string(),
            primary_path: rel("primary"),
            auxiliary_path: rel("aux"),
            label_path: rel("label"),
            edge_path: rel("edge"),
            changed_cells: scene.changed_cells,
        });
    }

    let mut w = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut records = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line)?);
    }
    Ok(records)
}

/// Load one sample's tensors back from disk.
pub fn load_sample(dir: &Path, record: &ManifestRecord) -> Result<SceneSample> {
    Ok(SceneSample {
        primary: mtf::load_tensor(&dir.join(&record.primary_path))?,
        auxiliary: mtf::load_tensor(&dir.join(&record.auxiliary_path))?,
        label: mtf::load_tensor(&dir.join(&record.label_path))?,
        edge: mtf::load_tensor(&dir.join(&record.edge_path))?,
        changed_cells: record.changed_cells.clone(),
    })
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn zero_changes_mean_consistent_auxiliary() {
        let spec = SceneSpec {
            change_patches: 0,
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec, 0).unwrap();
        assert!(s.changed_cells.is_empty());
        let h = height_map(&s.label);
        for (a, want) in s.auxiliary.data().iter().zip(h.data()) {
            assert!((a - want).abs() < 6.0 * spec.noise_sigma);
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 3).unwrap();
        let b = generate_scene(&spec, 3).unwrap();
        assert!(a.primary.bit_eq(&b.primary));
        assert!(a.auxiliary.bit_eq(&b.auxiliary));
        assert!(a.label.bit_eq(&b.label));
        assert_eq!(a.changed_cells, b.changed_cells);
        let c = generate_scene(&spec, 4).unwrap();
        assert!(!a.auxiliary.bit_eq(&c.auxiliary));
    }

    #[test]
    fn exactly_m_cells_deviate_beyond_three_sigma() {
        let spec = SceneSpec::default();
        let s = generate_scene(&spec, 1).unwrap();
        assert_eq!(s.changed_cells.len(), 20);
        let h = height_map(&s.label);
        let grid = PatchGrid::new(spec.size, spec.size, spec.patch).unwrap();
        let mut deviating = Vec::new();
        for i in 0..grid.len() {
            let (row, col) = grid.cell(i);
            let mut acc = 0.0f64;
            for py in 0..spec.patch {
                let y = row * spec.patch + py;
                for px in 0..spec.patch {
                    let p = y * spec.size + col * spec.patch + px;
                    acc += f64::from((s.auxiliary.data()[p] - h.data()[p]).abs());
                }
            }
            let mean = acc / (spec.patch * spec.patch) as f64;
            if mean > 3.0 * f64::from(spec.noise_sigma) {
                deviating.push(i);
            }
        }
        assert_eq!(deviating, s.changed_cells);
    }

    #[test]
    fn trees_are_darker_than_background() {
        let s = generate_scene(&SceneSpec::default(), 7).unwrap();
        let lum = gma::luminance(&s.primary).unwrap();
        let (mut tree_sum, mut tree_n, mut bg_sum, mut bg_n) = (0.0f64, 0u64, 0.0f64, 0u64);
        for (l, v) in s.label.data().iter().zip(lum.data()) {
            if *l == 1.0 {
                tree_sum += f64::from(*v);
                tree_n += 1;
            } else {
                bg_sum += f64::from(*v);
                bg_n += 1;
            }
        }
        assert!(tree_sum / tree_n as f64 + 0.2 < bg_sum / bg_n as f64);
    }

    #[test]
    fn edge_is_morphological_gradient() {
        let mut label = vec![0.0f32; 49];
        label[3 * 7 + 3] = 1.0;
        let label = Tensor::new(vec![1, 7, 7], label).unwrap();
        let edge = morph_gradient(&label);
        for y in 0..7 {
            for x in 0..7 {
                let inside_band = (2..=4).contains(&y) && (2..=4).contains(&x);
                assert_eq!(edge.at3(0, y, x), if inside_band { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn split_size_arithmetic() {
        assert_eq!(split_sizes(40, (0.7, 0.15, 0.15)).unwrap(), (28, 6, 6));
        assert_eq!(split_sizes(200, (0.7, 0.15, 0.15)).unwrap(), (140, 30, 30));
        assert!(split_sizes(10, (0.5, 0.2, 0.2)).is_err());
    }

    #[test]
    fn dataset_round_trip_and_disjoint_splits() {
        let dir = tempdir().unwrap();
        let spec = SceneSpec {
            size: 32,
            tree_blobs: 4,
            radius_min: 4.0,
            radius_max: 7.0,
            change_patches: 4,
            seed: 9,
            ..SceneSpec::default()
        };
        let records = write_dataset(dir.path(), &spec, 12, (0.7, 0.15, 0.15)).unwrap();
        assert_eq!(records.len(), 12);
        let n_train = records.iter().filter(|r| r.split == "train").count();
        let n_val = records.iter().filter(|r| r.split == "val").count();
        let n_test = records.iter().filter(|r| r.split == "test").count();
        assert_eq!((n_train, n_val, n_test), (8, 1, 3));

        let loaded = read_manifest(dir.path()).unwrap();
        assert_eq!(loaded.len(), 12);
        let sample = load_sample(dir.path(), &loaded[5]).unwrap();
        let direct = generate_scene(&spec, 5).unwrap();
        assert!(sample.primary.bit_eq(&direct.primary));
        assert!(sample.auxiliary.bit_eq(&direct.auxiliary));
        assert_eq!(sample.changed_cells, direct.changed_cells);
    }

    #[test]
    fn same_seed_gives_identical_manifest_bytes() {
        let spec = SceneSpec {
            size: 32,
            tree_blobs: 4,
            radius_min: 4.0,
            radius_max: 7.0,
            change_patches: 3,
            seed: 11,
            ..SceneSpec::default()
        };
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        write_dataset(d1.path(), &spec, 6, (0.7, 0.15, 0.15)).unwrap();
        write_dataset(d2.path(), &spec, 6, (0.7, 0.15, 0.15)).unwrap();
        let m1 = std::fs::read(manifest_path(d1.path())).unwrap();
        let m2 = std::fs::read(manifest_path(d2.path())).unwrap();
        assert_eq!(m1, m2);
    }
}
