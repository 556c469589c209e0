//! Forward and reverse-mode passes of the fixed encoder-decoder.
//!
//! ```text
//! x ─ enc1 ─ relu ─ enc2 ─ relu ─┬─ pool ─ mid1 ─ relu ─ mid2 ─ relu ─ up ─┐
//!                                └──────────────── skip ────────────────────┴─ concat ─ dec1 ─ relu ─ head ─ Z
//! ```

use super::ops::*;
use super::params::{Params, ARCHITECTURE};
use super::real::Real;
use crate::error::{Error, Result};
use crate::grid::{FeatureMap, ImageGrid};

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    size: usize,
    shapes: Vec<Vec<usize>>,
    col: [Vec<T>; 6],
    a1: Vec<T>,
    a2: Vec<T>,
    pool_arg: Vec<u32>,
    a3: Vec<T>,
    a4: Vec<T>,
    a5: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn size(&self) -> usize {
        self.size
    }

    /// True when both passes took the same ReLU gates and pooling choices,
    /// i.e. they lie on the same linear piece of the network.
    pub fn same_pattern(&self, other: &Self) -> bool {
        let gates =
            |a: &[T], b: &[T]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (*x > T::zero()) == (*y > T::zero()));
        self.size == other.size
            && self.pool_arg == other.pool_arg
            && gates(&self.a1, &other.a1)
            && gates(&self.a2, &other.a2)
            && gates(&self.a3, &other.a3)
            && gates(&self.a4, &other.a4)
            && gates(&self.a5, &other.a5)
    }
}

fn check_input(img: &ImageGrid) -> Result<usize> {
    let n = img.height();
    if img.width() != n || n < 2 || !n.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "model input must be square with even side, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(n)
}

/// Runs the network on a square input whose side is `expected` pixels.
pub fn forward_sized<T: Real>(
    p: &Params<T>,
    img: &ImageGrid,
    expected: usize,
) -> Result<(FeatureMap, ForwardCache<T>)> {
    if img.height() != expected || img.width() != expected {
        return Err(Error::Shape(format!(
            "model input must be {expected}x{expected}, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    forward(p, img)
}

/// Runs the network on any square, even-sided input.
pub fn forward<T: Real>(p: &Params<T>, img: &ImageGrid) -> Result<(FeatureMap, ForwardCache<T>)> {
    run(p, img, None)
}

/// Evaluates the linear piece of the network selected by `pattern`: ReLU
/// gates and pooling choices are copied from that cache instead of being
/// recomputed. Agrees with [`forward`] wherever the pattern is unchanged.
pub fn forward_frozen<T: Real>(p: &Params<T>, img: &ImageGrid, pattern: &ForwardCache<T>) -> Result<FeatureMap> {
    if img.height() != pattern.size {
        return Err(Error::State("pattern was recorded at a different input size".into()));
    }
    run(p, img, Some(pattern)).map(|(z, _)| z)
}

fn gate<T: Real>(x: &mut [T], frozen: Option<&[T]>) {
    match frozen {
        None => relu_inplace(x),
        Some(mask) => {
            for (v, &m) in x.iter_mut().zip(mask) {
                if m <= T::zero() {
                    *v = T::zero();
                }
            }
        }
    }
}

fn run<T: Real>(
    p: &Params<T>,
    img: &ImageGrid,
    frozen: Option<&ForwardCache<T>>,
) -> Result<(FeatureMap, ForwardCache<T>)> {
    let n = check_input(img)?;
    p.validate()?;
    let h = n / 2;
    let l = &ARCHITECTURE;
    let x: Vec<T> = img.values().iter().map(|&v| T::from_f64(v as f64)).collect();

    let (mut a1, c0) = conv_forward(&x, l[0].cin, n, n, l[0].kernel, p.weight(0), p.bias(0));
    gate(&mut a1, frozen.map(|f| &f.a1[..]));
    let (mut a2, c1) = conv_forward(&a1, l[1].cin, n, n, l[1].kernel, p.weight(1), p.bias(1));
    gate(&mut a2, frozen.map(|f| &f.a2[..]));
    let (pooled, pool_arg) = match frozen {
        None => maxpool2(&a2, l[1].cout, n, n),
        Some(f) => (f.pool_arg.iter().map(|&i| a2[i as usize]).collect(), f.pool_arg.clone()),
    };
    let (mut a3, c2) = conv_forward(&pooled, l[2].cin, h, h, l[2].kernel, p.weight(2), p.bias(2));
    gate(&mut a3, frozen.map(|f| &f.a3[..]));
    let (mut a4, c3) = conv_forward(&a3, l[3].cin, h, h, l[3].kernel, p.weight(3), p.bias(3));
    gate(&mut a4, frozen.map(|f| &f.a4[..]));
    let mut cat = upsample2(&a4, l[3].cout, h, h);
    cat.extend_from_slice(&a2);
    let (mut a5, c4) = conv_forward(&cat, l[4].cin, n, n, l[4].kernel, p.weight(4), p.bias(4));
    gate(&mut a5, frozen.map(|f| &f.a5[..]));
    let (out, c5) = conv_forward(&a5, l[5].cin, n, n, l[5].kernel, p.weight(5), p.bias(5));

    let z = FeatureMap::from_planar(n, n, out.iter().map(|v| v.as_f64()).collect())?;
    let cache = ForwardCache {
        size: n,
        shapes: p.blocks.iter().map(|b| b.shape.clone()).collect(),
        col: [c0, c1, c2, c3, c4, c5],
        a1,
        a2,
        pool_arg,
        a3,
        a4,
        a5,
    };
    Ok((z, cache))
}

/// Exact parameter gradients of a scalar loss whose gradient with respect
/// to the network output is `grad_z`.
pub fn backward<T: Real>(p: &Params<T>, cache: &ForwardCache<T>, grad_z: &FeatureMap) -> Result<Params<T>> {
    let shapes: Vec<&Vec<usize>> = p.blocks.iter().map(|b| &b.shape).collect();
    if shapes.len() != cache.shapes.len() || shapes.iter().zip(&cache.shapes).any(|(a, b)| *a != b) {
        return Err(Error::State("forward cache was produced by a different parameter layout".into()));
    }
    let n = cache.size;
    if grad_z.height() != n || grad_z.width() != n {
        return Err(Error::State(format!(
            "output gradient is {}x{}, cache holds a {n}x{n} pass",
            grad_z.height(),
            grad_z.width()
        )));
    }
    let h = n / 2;
    let l = &ARCHITECTURE;
    let mut g = Params::<T>::zeros();
    let dz: Vec<T> = grad_z.data().iter().map(|&v| T::from_f64(v)).collect();

    let mut grads: Vec<(Vec<T>, Vec<T>)> = vec![(Vec::new(), Vec::new()); 6];
    let mut conv_bw = |layer: usize, gout: &[T], hh: usize, need: bool| -> Option<Vec<T>> {
        let spec = l[layer];
        let mut gwt = vec![T::zero(); spec.weight_len()];
        let mut gb = vec![T::zero(); spec.cout];
        let gin = conv_backward(
            gout,
            &cache.col[layer],
            spec.cin,
            hh,
            hh,
            spec.kernel,
            p.weight(layer),
            &mut gwt,
            &mut gb,
            need,
        );
        grads[layer] = (gwt, gb);
        gin
    };

    let mut d5 = conv_bw(5, &dz, n, true).unwrap();
    relu_backward(&cache.a5, &mut d5);
    let dcat = conv_bw(4, &d5, n, true).unwrap();
    let up_len = l[3].cout * n * n;
    let mut d4 = upsample2_backward(&dcat[..up_len], l[3].cout, h, h);
    let mut d2_skip = dcat[up_len..].to_vec();
    relu_backward(&cache.a4, &mut d4);
    let mut d3 = conv_bw(3, &d4, h, true).unwrap();
    relu_backward(&cache.a3, &mut d3);
    let dpool = conv_bw(2, &d3, h, true).unwrap();
    let d2_pool = maxpool2_backward(&dpool, &cache.pool_arg, l[1].cout * n * n);
    for (a, b) in d2_skip.iter_mut().zip(&d2_pool) {
        *a = *a + *b;
    }
    let mut d2 = d2_skip;
    relu_backward(&cache.a2, &mut d2);
    let mut d1 = conv_bw(1, &d2, n, true).unwrap();
    relu_backward(&cache.a1, &mut d1);
    conv_bw(0, &d1, n, false);

    for (layer, (gwt, gb)) in grads.into_iter().enumerate() {
        g.blocks[2 * layer].values = gwt;
        g.blocks[2 * layer + 1].values = gb;
    }
    Ok(g)
}
