//! Central finite-difference verification of the tape's gradients.
//!
//! [`check`] perturbs every parameter entry by `±h`, rebuilds the tape and
//! compares the slope with the reverse-mode gradient. [`random_suite`] runs
//! it over small randomized networks covering every differentiable op.

use rand::{Rng, SeedableRng};

use super::{Graph, NodeId, Tensor};
use crate::error::Result;
use crate::renderer::Image;
use crate::representation::{images_to_tensor, Vae, VaeArchitecture};
use crate::seeding;

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that entries with vanishing gradient are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Parameter entries compared.
    pub checked: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradient of the scalar built by `build` with central
/// differences of step `h`. `build` must be a pure function of the
/// parameters it binds.
pub fn check<F>(name: &str, params: &[Tensor], h: f64, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[Tensor]| -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let out = build(&mut g, &ids)?;
        Ok((g, out))
    };
    let (g, out) = eval(params)?;
    let grads = g.backward(out)?.dense(params);
    let mut work = params.to_vec();
    let mut report = CheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
    };
    for (slot, grad) in grads.iter().enumerate() {
        for i in 0..work[slot].len() {
            let orig = work[slot].data()[i];
            work[slot].data_mut()[i] = orig + h;
            let (gp, op) = eval(&work)?;
            let plus = gp.value(op).item();
            work[slot].data_mut()[i] = orig - h;
            let (gm, om) = eval(&work)?;
            let minus = gm.value(om).item();
            work[slot].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad.data()[i], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn uniform<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn targets<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

/// `n` randomized small networks, cycling through dense, convolution,
/// transposed convolution, rectified stacks, the Gaussian latent head and a
/// miniature VAE, each checked with step `h`.
pub fn random_suite(n: usize, seed: u64, h: f64) -> Result<Vec<CheckReport>> {
    (0..n).map(|i| instance(i, seed, h)).collect()
}

fn instance(i: usize, seed: u64, h: f64) -> Result<CheckReport> {
    let mut rng = seeding::Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(i as u64));
    let r = &mut rng;
    match i % 6 {
        0 => {
            let (b, n_in) = (r.random_range(1..4), r.random_range(2..6));
            let (hid, n_out) = (r.random_range(2..6), r.random_range(1..5));
            let params = vec![
                uniform(&[b, n_in], 1.0, r),
                uniform(&[hid, n_in], 1.0, r),
                uniform(&[hid], 0.5, r),
                uniform(&[n_out, hid], 1.0, r),
                uniform(&[n_out], 0.5, r),
            ];
            let t = targets(&[b, n_out], r);
            check(&format!("dense-sigmoid-dense #{i}"), &params, h, |g, p| {
                let d = g.dense(p[0], p[1], Some(p[2]))?;
                let s = g.sigmoid(d);
                let o = g.dense(s, p[3], Some(p[4]))?;
                g.bernoulli_nll(o, t.clone())
            })
        }
        1 => {
            let (b, cin, cout) = (
                r.random_range(1..3),
                r.random_range(1..3),
                r.random_range(1..4),
            );
            // alternate 3x3/stride-1 and 4x4/stride-2 geometries
            let (k, stride) = if (i / 6).is_multiple_of(2) {
                (3, 1)
            } else {
                (4, 2)
            };
            let pad = r.random_range(0..2);
            let side = r.random_range(k + 1..k + 5);
            let params = vec![
                uniform(&[b, cin, side, side], 1.0, r),
                uniform(&[cout, cin, k, k], 0.7, r),
                uniform(&[cout], 0.3, r),
            ];
            let out = (side + 2 * pad - k) / stride + 1;
            let t = targets(&[b, cout, out, out], r);
            check(
                &format!("conv k{k} s{stride} p{pad} #{i}"),
                &params,
                h,
                |g, p| {
                    let c = g.conv2d(p[0], p[1], Some(p[2]), stride, pad)?;
                    g.bernoulli_nll(c, t.clone())
                },
            )
        }
        2 => {
            let (b, cin, cout) = (
                r.random_range(1..3),
                r.random_range(1..3),
                r.random_range(1..3),
            );
            let (k, stride) = if (i / 6).is_multiple_of(2) {
                (3, 1)
            } else {
                (4, 2)
            };
            let pad = r.random_range(0..2);
            let side = r.random_range(2..5);
            let params = vec![
                uniform(&[b, cin, side, side], 1.0, r),
                uniform(&[cin, cout, k, k], 0.7, r),
                uniform(&[cout], 0.3, r),
            ];
            let out = (side - 1) * stride + k - 2 * pad;
            let t = targets(&[b, cout, out, out], r);
            check(
                &format!("conv-transpose k{k} s{stride} p{pad} #{i}"),
                &params,
                h,
                |g, p| {
                    let c = g.conv_transpose2d(p[0], p[1], Some(p[2]), stride, pad)?;
                    g.bernoulli_nll(c, t.clone())
                },
            )
        }
        3 => {
            let (b, ch) = (r.random_range(1..3), r.random_range(1..3));
            let params = vec![
                uniform(&[b, 1, 6, 6], 1.0, r),
                uniform(&[ch, 1, 4, 4], 0.8, r),
                uniform(&[ch], 0.3, r),
                uniform(&[3, ch * 9], 0.8, r),
                uniform(&[3], 0.3, r),
            ];
            let t = targets(&[b, 3], r);
            check(
                &format!("conv-relu-flatten-dense #{i}"),
                &params,
                h,
                |g, p| {
                    let c = g.conv2d(p[0], p[1], Some(p[2]), 2, 1)?;
                    let a = g.relu(c);
                    let f = g.flatten(a)?;
                    let d = g.dense(f, p[3], Some(p[4]))?;
                    g.bernoulli_nll(d, t.clone())
                },
            )
        }
        4 => {
            let (b, l) = (r.random_range(1..4), r.random_range(1..4));
            let params = vec![uniform(&[b, 2 * l], 1.0, r), uniform(&[2, l], 1.0, r)];
            let beta = r.random_range(0.5..4.0);
            let noise_seed = r.random();
            let t = targets(&[b, 2], r);
            check(&format!("gaussian-head #{i}"), &params, h, |g, p| {
                let mu = g.slice_cols(p[0], 0, l)?;
                let lv = g.slice_cols(p[0], l, l)?;
                let z = g.reparameterize(mu, lv, &mut seeding::Rng::seed_from_u64(noise_seed))?;
                let d = g.dense(z, p[1], None)?;
                let nll = g.bernoulli_nll(d, t.clone())?;
                let kl = g.kl_gaussian(mu, lv)?;
                let kl = g.scale(kl, beta);
                let r = g.reshape(kl, &[1])?;
                let s = g.sum(r);
                g.add(nll, s)
            })
        }
        _ => {
            let arch = VaeArchitecture {
                image_size: 8,
                conv_layers: 2,
                channels: 2,
                dense_layers: 1,
                dense_units: 4,
                latent_dim: 2,
                beta: r.random_range(0.5..2.0),
            };
            let vae = Vae::<f64>::new(arch.clone(), r)?;
            let images: Vec<Image> = (0..2)
                .map(|_| {
                    let px = (0..64)
                        .map(|_| if r.random_bool(0.3) { 255 } else { 0 })
                        .collect();
                    Image::from_bytes(8, px)
                })
                .collect::<Result<_>>()?;
            let batch = images_to_tensor::<f64>(&images, 8)?;
            let noise_seed: u64 = r.random();
            vae_check(i, &vae, &batch, noise_seed, h)
        }
    }
}

/// The miniature VAE binds its own parameters, so it is perturbed through a
/// rebuilt model instead of the generic builder.
fn vae_check(
    i: usize,
    vae: &Vae<f64>,
    batch: &Tensor,
    noise_seed: u64,
    h: f64,
) -> Result<CheckReport> {
    let loss = |v: &Vae<f64>| -> Result<(Graph, NodeId)> {
        let (g, out, _) = v.elbo(batch, &mut seeding::Rng::seed_from_u64(noise_seed))?;
        Ok((g, out))
    };
    let (g, out) = loss(vae)?;
    let grads = g.backward(out)?.dense(vae.params());
    let mut work = vae.clone();
    let mut report = CheckReport {
        name: format!("mini-vae #{i}"),
        checked: 0,
        max_rel_error: 0.0,
    };
    for (slot, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work.params()[slot].data()[j];
            work.params_mut()[slot].data_mut()[j] = orig + h;
            let (gp, op) = loss(&work)?;
            work.params_mut()[slot].data_mut()[j] = orig - h;
            let (gm, om) = loss(&work)?;
            work.params_mut()[slot].data_mut()[j] = orig;
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
            report.max_rel_error = report
                .max_rel_error
                .max(relative_error(grad.data()[j], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
