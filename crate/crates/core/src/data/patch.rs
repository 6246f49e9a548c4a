use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{HsiCube, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mirror index about the border without repeating the edge pixel
/// (`-1 → 1`, `n → n-2`); clamps when the cube is too small to reflect.
fn reflect(i: isize, n: usize) -> usize {
    let last = n as isize - 1;
    let r = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    r.clamp(0, last) as usize
}

fn check(cube: &HsiCube, row: usize, col: usize, s: usize) -> Result<()> {
    if s == 0 || s.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("patch size must be odd, got {s}")));
    }
    if row >= cube.height() || col >= cube.width() {
        return Err(Error::InvalidArgument(format!(
            "center ({row}, {col}) outside {}×{} cube",
            cube.height(),
            cube.width()
        )));
    }
    Ok(())
}

fn fill(cube: &HsiCube, row: usize, col: usize, s: usize, out: &mut [f64]) {
    let half = (s / 2) as isize;
    let rows: Vec<usize> = (0..s as isize)
        .map(|i| reflect(row as isize + i - half, cube.height()))
        .collect();
    let cols: Vec<usize> = (0..s as isize)
        .map(|j| reflect(col as isize + j - half, cube.width()))
        .collect();
    let w = cube.width();
    let mut k = 0;
    for b in 0..cube.bands() {
        let band = cube.band(b);
        for &r in &rows {
            for &c in &cols {
                out[k] = band[r * w + c];
                k += 1;
            }
        }
    }
}

/// `[d, s, s]` window centered at `(row, col)`, mirrored at the borders.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, s: usize) -> Result<Tensor> {
    check(cube, row, col, s)?;
    let mut out = vec![0.0; cube.bands() * s * s];
    fill(cube, row, col, s, &mut out);
    Tensor::new(vec![cube.bands(), s, s], out)
}

/// `[B, d, s, s]` patches for `samples`, in order.
pub fn patch_batch(cube: &HsiCube, samples: &[Sample], s: usize) -> Result<Tensor> {
    let per = cube.bands() * s * s;
    let mut out = vec![0.0; samples.len() * per];
    for (smp, chunk) in samples.iter().zip(out.chunks_mut(per.max(1))) {
        check(cube, smp.row, smp.col, s)?;
        fill(cube, smp.row, smp.col, s, chunk);
    }
    Tensor::new(vec![samples.len(), cube.bands(), s, s], out)
}

/// One epoch of shuffled mini-batches; patches are cut when a batch is
/// requested. The last batch may be short.
pub struct Batches<'a> {
    cube: &'a HsiCube,
    order: Vec<Sample>,
    patch: usize,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iter<'a>(
    cube: &'a HsiCube,
    samples: &[Sample],
    patch: usize,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    for smp in samples {
        check(cube, smp.row, smp.col, patch)?;
    }
    let mut order = samples.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(Batches {
        cube,
        order,
        patch,
        batch_size,
        pos: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let chunk = &self.order[self.pos..end];
        self.pos = end;
        let x = patch_batch(self.cube, chunk, self.patch).expect("samples checked on construction");
        Some((x, chunk.iter().map(|s| s.label).collect()))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}
