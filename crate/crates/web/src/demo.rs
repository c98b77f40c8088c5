//! The computations behind the demo page, callable natively as well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use xmodnet::analysis::NoiseSpec;
use xmodnet::autodiff::Tape;
use xmodnet::data::{synthetic_dataset, EpisodeSpec, SyntheticMode};
use xmodnet::model::{classify_episode, cosine_u, film_generate, matching_probabilities, BnMode, BoundGenerator, ModelKind, Network};
use xmodnet::training::episode_at;
use xmodnet::{Error, Result, Tensor};

pub const FILM_CHANNELS: usize = 4;
pub const FILM_SIZE: usize = 6;

#[derive(Debug, Serialize)]
pub struct FilmView {
    pub channels: usize,
    pub size: usize,
    pub gamma_z: Vec<f64>,
    pub beta_z: Vec<f64>,
    /// Effective per-channel `1 + γ₀γ_z` and `β₀β_z`.
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    /// Channel-major `[C][H*W]` maps before and after modulation.
    pub input: Vec<Vec<f64>>,
    pub output: Vec<Vec<f64>>,
}

fn random_map(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = FILM_SIZE * FILM_SIZE * FILM_CHANNELS;
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new([1, FILM_SIZE, FILM_SIZE, FILM_CHANNELS], data).expect("sized")
}

fn channel_major(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..FILM_CHANNELS)
        .map(|c| t.data().iter().skip(c).step_by(FILM_CHANNELS).copied().collect())
        .collect()
}

/// One FiLM layer on a random feature map, conditioned on a partner map.
/// `seed` fixes the map and generator weights, `partner` the conditioning map.
pub fn film_explorer(seed: u64, partner: u64, gamma0: f64, beta0: f64) -> Result<FilmView> {
    let c = FILM_CHANNELS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_self = random_map(&mut rng);
    let w: Vec<f64> = (0..4 * c * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..2 * c).map(|_| rng.random_range(-0.2..0.2)).collect();
    let x_other = random_map(&mut ChaCha8Rng::seed_from_u64(partner ^ 0x5eed));

    let mut tape = Tape::<f64>::new();
    let xs = tape.constant(x_self.clone());
    let xo = tape.constant(x_other);
    let gen = BoundGenerator {
        w: tape.constant(Tensor::new([2 * c, 2 * c], w)?),
        b: tape.constant(Tensor::new([2 * c], b)?),
        gamma0: tape.constant(Tensor::full([c], gamma0)),
        beta0: tape.constant(Tensor::full([c], beta0)),
    };
    let (gz, bz) = film_generate(&mut tape, &gen, xs, xo)?;
    let out = tape.film(xs, gz, bz, gen.gamma0, gen.beta0)?;
    let gamma_z = tape.value(gz).data().to_vec();
    let beta_z = tape.value(bz).data().to_vec();
    Ok(FilmView {
        channels: c,
        size: FILM_SIZE,
        scale: gamma_z.iter().map(|g| 1.0 + gamma0 * g).collect(),
        shift: beta_z.iter().map(|b| beta0 * b).collect(),
        gamma_z,
        beta_z,
        input: channel_major(&x_self),
        output: channel_major(tape.value(out)),
    })
}

#[derive(Debug, Serialize)]
pub struct MatchView {
    pub similarities: Vec<f64>,
    pub clamped: Vec<bool>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

/// The matching head on hand-entered embeddings: `supports` holds one row
/// of `query.len()` values per label.
pub fn matching_head(query: &[f64], supports: &[f64], labels: &[usize], way: usize) -> Result<MatchView> {
    let d = query.len();
    if d == 0 || supports.len() != d * labels.len() {
        return Err(Error::Shape(format!(
            "{} support values for {} labels of dimension {d}",
            supports.len(),
            labels.len()
        )));
    }
    let cos = supports
        .chunks(d)
        .map(|s| cosine_u(query, s))
        .collect::<Result<Vec<_>>>()?;
    let similarities: Vec<f64> = cos.iter().map(|c| c.value).collect();
    let probabilities = matching_probabilities(&similarities, labels, way)?;
    Ok(MatchView {
        clamped: cos.iter().map(|c| c.clamped).collect(),
        predicted: argmax(&probabilities),
        similarities,
        probabilities,
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

#[derive(Debug, Serialize)]
pub struct ImageView {
    pub label: usize,
    pub rgba: Vec<u8>,
}

#[derive(Debug, Serialize)]
pub struct EpisodeView {
    pub way: usize,
    pub resolution: usize,
    pub support: Vec<ImageView>,
    pub query: Vec<ImageView>,
    /// `[query][class]`, with and without post-multiplier noise.
    pub noisy: Vec<Vec<f64>>,
    pub clean: Vec<Vec<f64>>,
    pub noisy_accuracy: f64,
    pub clean_accuracy: f64,
}

pub const EPISODE_RESOLUTION: usize = 16;
pub const EPISODE_WIDTH: usize = 8;
const QUERIES_PER_CLASS: usize = 2;

fn image_view(label: usize, img: &xmodnet::data::Image) -> ImageView {
    let rgba = img
        .pixels()
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect();
    ImageView { label, rgba }
}

fn rows_and_accuracy(probs: &Tensor<f64>, way: usize, labels: &[usize]) -> (Vec<Vec<f64>>, f64) {
    let rows: Vec<Vec<f64>> = probs.data().chunks(way).map(<[f64]>::to_vec).collect();
    let correct = rows.iter().zip(labels).filter(|(r, &l)| argmax(r) == l).count();
    (rows, correct as f64 / labels.len().max(1) as f64)
}

/// A one-shot episode of synthetic images classified by an untrained
/// cross-modulation network whose post-multipliers are all set to `gate`,
/// clean and with N(1, noise_std²) factors on blocks 2-4. Batch norm uses
/// the episode's own statistics.
pub fn classify_synthetic(seed: u64, way: usize, gate: f64, noise_std: f64) -> Result<EpisodeView> {
    if !(2..=8).contains(&way) {
        return Err(Error::Config(format!("way must be in 2..=8, got {way}")));
    }
    let split = synthetic_dataset(8, 1 + QUERIES_PER_CLASS, EPISODE_RESOLUTION, SyntheticMode::Separable, seed)?;
    let spec = EpisodeSpec {
        way,
        shot: 1,
        queries_per_class: QUERIES_PER_CLASS,
    };
    let episode = episode_at(&split, spec, seed, 0)?;
    let mut net = Network::<f64>::new(ModelKind::CrossMod, EPISODE_WIDTH, seed);
    for g in net.generators_mut() {
        g.gamma0.fill(gate);
        g.beta0.fill(gate);
    }
    let noise = NoiseSpec::new(vec![2, 3, 4], noise_std, seed)?.draw::<f64>(EPISODE_WIDTH, 0)?;
    let clean = classify_episode(&net, &episode, BnMode::Transductive, None)?;
    let noisy = classify_episode(&net, &episode, BnMode::Transductive, Some(&noise))?;
    let labels = episode.query_labels();
    let (clean, clean_accuracy) = rows_and_accuracy(&clean, way, &labels);
    let (noisy, noisy_accuracy) = rows_and_accuracy(&noisy, way, &labels);
    Ok(EpisodeView {
        way,
        resolution: EPISODE_RESOLUTION,
        support: episode
            .support
            .iter()
            .zip(episode.support_labels())
            .map(|(e, l)| image_view(l, &e.image))
            .collect(),
        query: episode
            .query
            .iter()
            .zip(&labels)
            .map(|(e, &l)| image_view(l, &e.image))
            .collect(),
        noisy,
        clean,
        noisy_accuracy,
        clean_accuracy,
    })
}
