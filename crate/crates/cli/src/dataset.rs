//! Rendered scene datasets for representation pre-training.

use std::f64::consts::TAU;

use anyhow::{ensure, Result};
use imgep_core::env_sim::{EnvConfig, EnvVariant, SceneState};
use imgep_core::renderer::{render, ImageDataset, RenderConfig};
use imgep_core::seeding::{stream, Stream};
use rand::Rng;

/// Scene with its objects placed uniformly over their valid domains: on the
/// ring for ArmBall, anywhere in `[-1, 1]^2` for both Arm2Balls objects. The
/// arm stays in its initial pose.
pub fn random_scene<R: Rng + ?Sized>(env: &EnvConfig, rng: &mut R) -> SceneState {
    let mut scene = env.initial_state();
    match env.variant {
        EnvVariant::ArmBall => {
            let phi = rng.random_range(0.0..TAU);
            scene.ball_pos = [env.ring_radius * phi.cos(), env.ring_radius * phi.sin()];
        }
        EnvVariant::Arm2Balls => {
            scene.ball_pos = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            scene.distractor_pos =
                Some([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]);
        }
    }
    scene
}

/// The `n` random scenes behind a dataset.
pub fn generate_scenes(
    env: &EnvConfig,
    render_cfg: &RenderConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<SceneState>> {
    ensure!(
        n >= 1,
        imgep_core::Error::Argument("dataset needs at least one image".into())
    );
    env.validate()?;
    render_cfg.validate()?;
    let mut rng = stream(seed, Stream::Dataset);
    Ok((0..n).map(|_| random_scene(env, &mut rng)).collect())
}

pub fn generate(
    env: &EnvConfig,
    render_cfg: &RenderConfig,
    n: usize,
    seed: u64,
) -> Result<ImageDataset> {
    let mut dataset = ImageDataset::new(render_cfg.resolution);
    for scene in generate_scenes(env, render_cfg, n, seed)? {
        dataset.push(render(&scene, &env.link_lengths, render_cfg))?;
    }
    Ok(dataset)
}
