//! Seeded synthetic images and teacher labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::idx::Dataset;
use crate::model::{input_tensor, CoopModel};
use crate::tensor::Shape;

/// `n` images of oriented sinusoidal gratings plus noise, CHW u8.
pub fn synthetic_images(shape: Shape, n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * shape.len());
    for _ in 0..n {
        let fx: f32 = rng.gen_range(-0.9..0.9);
        let fy: f32 = rng.gen_range(-0.9..0.9);
        let amp: f32 = rng.gen_range(30.0..110.0);
        let base: f32 = rng.gen_range(90.0..170.0);
        for _ in 0..shape.channels {
            let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let v = base
                        + amp * (fx * x as f32 + fy * y as f32 + phase).sin()
                        + rng.gen_range(-12.0..12.0);
                    out.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    out
}

/// Synthetic images labelled by the int8 arm, with a fraction of labels
/// replaced by random classes.
pub fn synthetic_dataset(
    model: &CoopModel,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Vec<u8>)> {
    let shape = model.input_shape();
    let ds = Dataset::new(shape, synthetic_images(shape, n, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let classes = model.num_classes();
    let mut labels = Vec::with_capacity(n);
    for i in 0..ds.len() {
        let x = input_tensor(ds.sample(i), shape)?;
        let probs = model.int8().forward(&x)?.probs;
        let teacher = crate::cascade::top_two(&probs)?.0;
        let label = if rng.gen_bool(noise) { rng.gen_range(0..classes) } else { teacher };
        labels.push(label as u8);
    }
    Ok((ds, labels))
}
