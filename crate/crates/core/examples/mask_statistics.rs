//! How modality relevance turns into masking rates.

use mossl::augmentation::{align_to_input, modality_relevance, sample_mask};
use mossl::numerics::Tensor;
use mossl::seed::derive_seed;

fn rates(phi: &Tensor, draws: u64) -> Vec<f64> {
    let m = phi.shape()[2];
    let mut per_mod = vec![0.0; m];
    for i in 0..draws {
        let draw = sample_mask(phi, 1.0, derive_seed(0, "example", &[i]));
        for (j, v) in draw.mask.data().iter().enumerate() {
            per_mod[j % m] += v;
        }
    }
    let cells = (phi.len() / m) as f64 * draws as f64;
    per_mod.iter().map(|c| c / cells).collect()
}

fn main() -> mossl::Result<()> {
    let (nodes, mods, d, steps) = (5, 4, 6, 16);
    let h = Tensor::from_fn(&[1, nodes, mods, d], |i| {
        (i[2] as f64 - 1.5) * 0.4 + 0.05 * i[3] as f64
    });

    let uniform = align_to_input(&modality_relevance(&h, &Tensor::zeros(&[d]))?, steps)?;
    println!("w0 = 0     phi {:?}", &uniform.data()[..mods]);
    println!(
        "           mask rate per modality {:?}",
        rates(&uniform, 2000)
    );

    let skewed = align_to_input(&modality_relevance(&h, &Tensor::full(&[d], 1.0))?, steps)?;
    let phi: Vec<String> = skewed.data()[..mods]
        .iter()
        .map(|p| format!("{p:.3}"))
        .collect();
    println!("w0 = 1     phi [{}]", phi.join(", "));
    let r: Vec<String> = rates(&skewed, 2000)
        .iter()
        .map(|p| format!("{p:.3}"))
        .collect();
    println!("           mask rate per modality [{}]", r.join(", "));

    let a = sample_mask(&skewed, 1.0, 99);
    let b = sample_mask(&skewed, 1.0, 99);
    println!("same seed, same mask: {}", a.mask == b.mask);
    Ok(())
}
