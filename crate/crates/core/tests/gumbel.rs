use dagrank::autodiff::{softmax_rows, Graph};
use dagrank::cascade::{gumbel_noise, gumbel_relaxed_sample};
use dagrank::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn relaxed_row(logits: &[f64], noise: &Matrix<f64>, tau: f64) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Matrix::from_vec(1, logits.len(), logits.to_vec()));
    let s = gumbel_relaxed_sample(&mut g, l, &[0], noise, tau).unwrap();
    g.value(s).row(0).to_vec()
}

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).max_by(|&a, &b| xs[a].total_cmp(&xs[b])).unwrap()
}

#[test]
fn argmax_frequencies_follow_the_softmax() {
    let logits = [0.3, -1.2, 1.0, 0.0, -0.4];
    let probs = softmax_rows(&Matrix::from_vec(1, 5, logits.to_vec()));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let trials = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..trials {
        let noise = gumbel_noise(1, 5, &mut rng);
        counts[argmax(&relaxed_row(&logits, &noise, 0.5))] += 1;
    }
    for (c, &k) in counts.iter().enumerate() {
        let p = probs.get(0, c);
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (k as f64 - trials as f64 * p).abs() <= 3.0 * sigma,
            "class {c}: {k} vs {}",
            trials as f64 * p
        );
    }
}

#[test]
fn noise_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = gumbel_noise(200, 500, &mut rng);
    let mean = n.data().iter().sum::<f64>() / n.len() as f64;
    let var = n.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n.len() as f64;
    // Euler-Mascheroni constant and pi^2 / 6.
    assert!((mean - 0.5772156649).abs() < 0.01, "{mean}");
    assert!((var - std::f64::consts::PI.powi(2) / 6.0).abs() < 0.03, "{var}");
    assert!(n.is_finite());
}

// A cold softmax is off one-hot by at most `2 (k-1) exp(-gap / tau)` in total
// variation, where `gap` separates the top two perturbed logits.
#[test]
fn cold_rows_are_nearly_one_hot() {
    let logits = [0.3, -1.2, 1.0, 0.0, -0.4];
    let tau = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut close = 0;
    let trials = 2000;
    for _ in 0..trials {
        let noise = gumbel_noise(1, 5, &mut rng);
        let row = relaxed_row(&logits, &noise, tau);
        let mut z: Vec<f64> = logits.iter().zip(noise.row(0)).map(|(l, n)| l + n).collect();
        let top = argmax(&z);
        let tv = 1.0 - row[top];
        z.sort_by(|a, b| b.total_cmp(a));
        let bound = 2.0 * 4.0 * (-(z[0] - z[1]) / tau).exp();
        assert!(tv <= bound.min(0.5) + 1e-12, "tv {tv} bound {bound}");
        if tv <= 1e-3 {
            close += 1;
        }
    }
    assert!(close as f64 >= 0.9 * trials as f64, "{close}/{trials}");
}
