//! Patch grids: split a modality into non-overlapping P x P patches, embed
//! them, and reassemble patch features into spatial maps.
//!
//! One convention is used everywhere: patch index i maps row-major to cell
//! (i / cols, i % cols), and pixels flatten channel-major then row then
//! column within a patch. Score maps, top-K selection, and replacement all
//! agree on the same index.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Primary,
    Auxiliary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("patch grid extents must be positive"));
        }
        if height % patch != 0 || width % patch != 0 {
            let pad_h = (patch - height % patch) % patch;
            let pad_w = (patch - width % patch) % patch;
            return Err(Error::invalid(format!(
                "patch size {patch} does not divide image {height}x{width}; \
                 pad to {}x{} (add {pad_h} rows, {pad_w} cols) or change the patch size",
                height + pad_h,
                width + pad_w,
            )));
        }
        Ok(PatchGrid {
            height,
            width,
            patch,
            rows: height / patch,
            cols: width / patch,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

/// The N patch embeddings of one modality plus the grid they came from.
#[derive(Clone, Debug)]
pub struct PatchSequence {
    pub grid: PatchGrid,
    pub embeddings: Tensor,
    pub modality: Modality,
}

impl PatchSequence {
    pub fn new(grid: PatchGrid, embeddings: Tensor, modality: Modality) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != grid.len() {
            return Err(Error::ShapeMismatch {
                op: "patch_sequence",
                lhs: vec![grid.len()],
                rhs: embeddings.shape().to_vec(),
            });
        }
        Ok(PatchSequence { grid, embeddings, modality })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

/// Split [c, h, w] into [N, c*p*p] raw patches. Lossless; rejects
/// non-divisible extents with a padding hint.
pub fn patchify(image: &Tensor, patch: usize) -> Result<(PatchGrid, Tensor)> {
    if image.rank() != 3 {
        return Err(Error::invalid(format!(
            "patchify expects a [c, h, w] image, got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let grid = PatchGrid::new(h, w, patch)?;
    let p = patch;
    let mut data = Vec::with_capacity(grid.len() * c * p * p);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            for ch in 0..c {
                for py in 0..p {
                    let y = row * p + py;
                    let base = (ch * h + y) * w + col * p;
                    data.extend_from_slice(&image.data()[base..base + p]);
                }
            }
        }
    }
    Ok((grid, Tensor::from_parts(vec![grid.len(), c * p * p], data)))
}

/// Inverse of [`patchify`]: scatter [N, c*p*p] rows back into [c, h, w].
pub fn unpatchify(grid: &PatchGrid, channels: usize, patches: &Tensor) -> Result<Tensor> {
    let p = grid.patch;
    if patches.rank() != 2 || patches.shape() != [grid.len(), channels * p * p] {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: vec![grid.len(), channels * p * p],
            rhs: patches.shape().to_vec(),
        });
    }
    let (h, w) = (grid.height, grid.width);
    let mut data = vec![0.0f32; channels * h * w];
    for i in 0..grid.len() {
        let (row, col) = grid.cell(i);
        let src = &patches.data()[i * channels * p * p..(i + 1) * channels * p * p];
        for ch in 0..channels {
            for py in 0..p {
                let y = row * p + py;
                let dst = (ch * h + y) * w + col * p;
                let s = (ch * p + py) * p;
                data[dst..dst + p].copy_from_slice(&src[s..s + p]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![channels, h, w], data))
}

/// Per-patch affine projection into the embedding space.
pub fn embed(raw: &Tensor, w_e: &Tensor, b_e: &Tensor) -> Result<Tensor> {
    crate::ops::affine(raw, w_e, b_e)
}

/// Tape variant of [`embed`] for training.
pub fn embed_on_tape(tape: &mut Tape, raw: ValueId, w_e: ValueId, b_e: ValueId) -> Result<ValueId> {
    tape.affine(raw, w_e, b_e)
}

/// Rearrange [N, d] embeddings into a [d, rows, cols] feature map.
pub fn reassemble(seq: &PatchSequence) -> Result<Tensor> {
    let mut tape = Tape::new();
    let e = tape.input(&seq.embeddings);
    let out = reassemble_on_tape(&mut tape, e, &seq.grid)?;
    Ok(tape.value(out).clone())
}

/// Tape variant of [`reassemble`]: transpose to [d, N] then view as
/// [d, rows, cols].
pub fn reassemble_on_tape(tape: &mut Tape, embeddings: ValueId, grid: &PatchGrid) -> Result<ValueId> {
    let shape = tape.value(embeddings).shape().to_vec();
    if shape.len() != 2 || shape[0] != grid.len() {
        return Err(Error::ShapeMismatch {
            op: "reassemble",
            lhs: vec![grid.len()],
            rhs: shape,
        });
    }
    let d = shape[1];
    let t = tape.transpose2(embeddings)?;
    tape.reshape(t, vec![d, grid.rows, grid.cols])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use proptest::prelude::*;

    #[test]
    fn degenerate_single_patch() {
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|i| i as f32).collect()).unwrap();
        let (grid, raw) = patchify(&img, 4).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(raw.shape(), &[1, 16]);
        assert_eq!(raw.data(), img.data());
    }

    #[test]
    fn patch_layout_is_row_major_blocks() {
        let img = Tensor::new(vec![1, 8, 8], (0..64).map(|i| i as f32).collect()).unwrap();
        let (grid, raw) = patchify(&img, 4).unwrap();
        assert_eq!(grid.len(), 4);
        // Patch 0 holds rows 0..4 x cols 0..4.
        let want: Vec<f32> = (0..4)
            .flat_map(|y| (0..4).map(move |x| (y * 8 + x) as f32))
            .collect();
        assert_eq!(&raw.data()[..16], want.as_slice());
        // Patch 1 is the top-right block.
        assert_eq!(raw.data()[16], 4.0);
    }

    #[test]
    fn rejects_non_divisible_with_padding_hint() {
        let img = Tensor::zeros(&[1, 10, 10]);
        let err = patchify(&img, 4).unwrap_err().to_string();
        assert!(err.contains("12x12"), "{err}");
    }

    #[test]
    fn round_trip_is_bitwise() {
        let k = StreamKey::new(21).with_str("patch_rt");
        let img = Tensor::new(vec![3, 16, 16], k.uniform_vec_f32(768, -1.0, 1.0)).unwrap();
        let (grid, raw) = patchify(&img, 4).unwrap();
        let back = unpatchify(&grid, 3, &raw).unwrap();
        assert!(back.bit_eq(&img));
    }

    #[test]
    fn embed_identity_and_bias_only() {
        let k = StreamKey::new(22).with_str("embed");
        let raw = Tensor::new(vec![4, 3], k.uniform_vec_f32(12, -1.0, 1.0)).unwrap();
        let mut eye = vec![0.0f32; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let out = embed(&raw, &Tensor::new(vec![3, 3], eye).unwrap(), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(out.data(), raw.data());

        let b = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let out = embed(&raw, &Tensor::zeros(&[3, 2]), &b).unwrap();
        for row in out.data().chunks_exact(2) {
            assert_eq!(row, &[0.5, -1.0]);
        }
    }

    #[test]
    fn reassemble_inverts_grid_flattening() {
        let grid = PatchGrid::new(8, 12, 4).unwrap();
        let k = StreamKey::new(23).with_str("reasm");
        let emb = Tensor::new(vec![grid.len(), 5], k.uniform_vec_f32(grid.len() * 5, -1.0, 1.0)).unwrap();
        let seq = PatchSequence::new(grid, emb.clone(), Modality::Auxiliary).unwrap();
        let map = reassemble(&seq).unwrap();
        assert_eq!(map.shape(), &[5, 2, 3]);
        for i in 0..grid.len() {
            let (r, c) = grid.cell(i);
            for d in 0..5 {
                assert_eq!(map.at3(d, r, c), emb.at2(i, d));
            }
        }
    }

    #[test]
    fn reassemble_single_patch() {
        let grid = PatchGrid::new(4, 4, 4).unwrap();
        let emb = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let seq = PatchSequence::new(grid, emb, Modality::Primary).unwrap();
        let map = reassemble(&seq).unwrap();
        assert_eq!(map.shape(), &[3, 1, 1]);
        assert_eq!(map.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn swapping_patch_rows_swaps_two_cells() {
        let grid = PatchGrid::new(8, 8, 4).unwrap();
        let k = StreamKey::new(24).with_str("swap");
        let mut data = k.uniform_vec_f32(4 * 2, -1.0, 1.0);
        let base = Tensor::new(vec![4, 2], data.clone()).unwrap();
        data.swap(0, 2);
        data.swap(1, 3);
        let swapped = Tensor::new(vec![4, 2], data).unwrap();
        let m1 = reassemble(&PatchSequence::new(grid, base, Modality::Primary).unwrap()).unwrap();
        let m2 = reassemble(&PatchSequence::new(grid, swapped, Modality::Primary).unwrap()).unwrap();
        let mut diff_cells = Vec::new();
        for r in 0..2 {
            for c in 0..2 {
                if (0..2).any(|d| m1.at3(d, r, c) != m2.at3(d, r, c)) {
                    diff_cells.push((r, c));
                }
            }
        }
        assert_eq!(diff_cells, vec![(0, 0), (0, 1)]);
    }

    proptest! {
        #[test]
        fn patchify_round_trip_property(
            c in 1usize..4,
            rows in 1usize..4,
            cols in 1usize..4,
            p in 1usize..5,
            seed in 0u64..1000,
        ) {
            let (h, w) = (rows * p, cols * p);
            let k = StreamKey::new(seed).with_str("patch_prop");
            let img = Tensor::new(vec![c, h, w], k.uniform_vec_f32(c * h * w, -2.0, 2.0)).unwrap();
            let (grid, raw) = patchify(&img, p).unwrap();
            let back = unpatchify(&grid, c, &raw).unwrap();
            prop_assert!(back.bit_eq(&img));
        }
    }
}
