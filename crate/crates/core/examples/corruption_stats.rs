//! Empirical corruption rates against the closed forms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sundae::corruption::{corrupt, corrupt_with_alpha, corruption_matrix};

fn main() -> sundae::Result<()> {
    let (v, n, draws) = (8usize, 16usize, 20_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<u32> = (0..n as u32).map(|i| i % v as u32).collect();
    let changed: usize = (0..draws)
        .map(|_| corrupt(&x, v, &mut rng).corrupted.iter().zip(&x).filter(|(a, b)| a != b).count())
        .sum();
    println!("changed fraction {:.4}, expected {:.4}", changed as f64 / (draws * n) as f64, 0.5 * (1.0 - 1.0 / v as f64));

    let alpha = 0.3;
    let q = corruption_matrix(alpha, v)?;
    let mut counts = vec![0usize; v];
    for _ in 0..draws {
        let s = corrupt_with_alpha(&[2], v, alpha, &mut rng);
        counts[s.corrupted[0] as usize] += 1;
    }
    println!("token 2 at alpha={alpha}: observed vs matrix row");
    for (j, c) in counts.iter().enumerate() {
        println!("  -> {j}: {:.4} {:.4}", *c as f64 / draws as f64, q[2][j]);
    }
    Ok(())
}
