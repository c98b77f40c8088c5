use crate::autodiff::{NormStats, Tape, Var};
use crate::data::{batch_of, Episode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::head::vote;
use super::{BnMode, BnObservations, Bound, BoundGenerator, ModelKind, Network, PostMultiplierNoise, NUM_BLOCKS};

/// Queries per pair batch when batch norm is per-example (running stats),
/// which keeps cross-modulated evaluation memory bounded.
const EVAL_QUERY_CHUNK: usize = 8;

/// Cartesian support x query pairing, query-major: pair `p = j * S + i`
/// couples query `j` with support `i`, so a `[P]` vector reshapes to `[Q, S]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairLayout {
    pub supports: usize,
    pub queries: usize,
}

impl PairLayout {
    pub fn len(&self) -> usize {
        self.supports * self.queries
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn support_index(&self) -> Vec<usize> {
        (0..self.len()).map(|p| p % self.supports).collect()
    }

    pub fn query_index(&self) -> Vec<usize> {
        (0..self.len()).map(|p| p / self.supports).collect()
    }
}

/// `relu(global_avg_pool(x))`.
fn pooled<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let p = tape.global_avg_pool(x)?;
    tape.relu(p)
}

/// Generator applied to already pooled descriptors `[B, C]`; returns
/// `(gamma_z, beta_z)`, each `[B, C]`.
fn generate_from_pooled<T: Scalar>(
    tape: &mut Tape<T>,
    gen: &BoundGenerator,
    pooled_self: Var,
    pooled_other: Var,
) -> Result<(Var, Var)> {
    let c = tape.shape(pooled_self)[1];
    let joint = tape.concat_channels(pooled_self, pooled_other)?;
    let out = tape.affine(joint, gen.w, gen.b)?;
    let gamma_z = tape.columns(out, 0, c)?;
    let beta_z = tape.columns(out, c, 2 * c)?;
    Ok((gamma_z, beta_z))
}

/// FiLM parameters for the branch `x_self` conditioned on its pair `x_other`
/// (`[B, H, W, C]` each). Argument order matters: the generator is not
/// symmetric in its inputs.
pub fn film_generate<T: Scalar>(tape: &mut Tape<T>, gen: &BoundGenerator, x_self: Var, x_other: Var) -> Result<(Var, Var)> {
    if tape.shape(x_self) != tape.shape(x_other) {
        return Err(Error::Shape(format!(
            "film_generate inputs differ: {:?} vs {:?}",
            tape.shape(x_self),
            tape.shape(x_other)
        )));
    }
    let ps = pooled(tape, x_self)?;
    let po = pooled(tape, x_other)?;
    generate_from_pooled(tape, gen, ps, po)
}

/// One forward pass of a bound network.
pub struct Forward<'a, T> {
    net: &'a Network<T>,
    bound: &'a Bound,
    bn: BnMode,
    /// Batch statistics seen in [`BnMode::Train`].
    pub observations: BnObservations,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(net: &'a Network<T>, bound: &'a Bound, bn: BnMode) -> Self {
        Self {
            net,
            bound,
            bn,
            observations: BnObservations::default(),
        }
    }

    fn check_images(&self, tape: &Tape<T>, images: Var) -> Result<()> {
        match *tape.shape(images) {
            [_, h, w, 3] if h == w && h >= 16 => Ok(()),
            ref s => Err(Error::Shape(format!(
                "images must be [B, H, H, 3] with H >= 16, got {s:?}"
            ))),
        }
    }

    /// conv -> batch norm for a 0-based block index.
    fn conv_bn(&mut self, tape: &mut Tape<T>, block: usize, x: Var) -> Result<Var> {
        let b = &self.bound.blocks[block];
        let conv = tape.conv2d(x, b.kernels, b.conv_bias)?;
        let stats = match self.bn {
            BnMode::Train | BnMode::Transductive => NormStats::Batch,
            BnMode::Eval => {
                let running = self.net.blocks[block]
                    .running
                    .as_ref()
                    .ok_or_else(|| Error::UninitializedRunningStats(format!("block{}", block + 1)))?;
                NormStats::Running {
                    mean: &running.mean,
                    var: &running.var,
                }
            }
        };
        let (y, observed) = tape.batch_norm(conv, b.bn_gamma, b.bn_beta, stats)?;
        if self.bn == BnMode::Train {
            if let Some(o) = observed {
                self.observations.entries.push((block, o));
            }
        }
        Ok(y)
    }

    fn relu_pool(tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let r = tape.relu(x)?;
        tape.max_pool_2x2(r, true)
    }

    fn flatten(tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let d = shape[1..].iter().product::<usize>();
        tape.reshape(x, &[shape[0], d])
    }

    /// Baseline embedding `[B, D]`: four conv -> bn -> relu -> pool blocks,
    /// flattened row-major.
    pub fn embed_baseline(&mut self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        self.check_images(tape, images)?;
        let mut x = images;
        for block in 0..NUM_BLOCKS {
            let y = self.conv_bn(tape, block, x)?;
            x = Self::relu_pool(tape, y)?;
        }
        Self::flatten(tape, x)
    }

    /// Pair-specific embeddings `(f_support, f_query)`, each `[P, D]` in
    /// [`PairLayout`] order.
    ///
    /// Block 1 runs once per image. Block 2's convolution also only sees
    /// unmodulated input, so it runs per image too; pairs are formed right
    /// before its FiLM layer. From there on each branch is modulated by the
    /// shared generator with arguments `(self, other)`.
    pub fn embed_crossmod(&mut self, tape: &mut Tape<T>, support: Var, query: Var) -> Result<(Var, Var)> {
        if self.net.kind() != ModelKind::CrossMod {
            return Err(Error::Unsupported("cross-modulated embedding needs FiLM generators".into()));
        }
        self.check_images(tape, support)?;
        self.check_images(tape, query)?;
        if tape.shape(support)[1..] != tape.shape(query)[1..] {
            return Err(Error::Shape("support and query images differ in resolution".into()));
        }
        let layout = PairLayout {
            supports: tape.shape(support)[0],
            queries: tape.shape(query)[0],
        };
        let (si, qi) = (layout.support_index(), layout.query_index());

        let y = self.conv_bn(tape, 0, support)?;
        let mut s = Self::relu_pool(tape, y)?;
        let y = self.conv_bn(tape, 0, query)?;
        let mut q = Self::relu_pool(tape, y)?;

        let mut paired = false;
        for block in 1..NUM_BLOCKS {
            let gen = &self.bound.generators[block - 1];
            let mut a_s = self.conv_bn(tape, block, s)?;
            let mut a_q = self.conv_bn(tape, block, q)?;
            let mut p_s = pooled(tape, a_s)?;
            let mut p_q = pooled(tape, a_q)?;
            if !paired {
                a_s = tape.gather_rows(a_s, &si)?;
                a_q = tape.gather_rows(a_q, &qi)?;
                p_s = tape.gather_rows(p_s, &si)?;
                p_q = tape.gather_rows(p_q, &qi)?;
                paired = true;
            }
            let (g_s, b_s) = generate_from_pooled(tape, gen, p_s, p_q)?;
            let (g_q, b_q) = generate_from_pooled(tape, gen, p_q, p_s)?;
            let m_s = tape.film(a_s, g_s, b_s, gen.gamma0, gen.beta0)?;
            let m_q = tape.film(a_q, g_q, b_q, gen.gamma0, gen.beta0)?;
            s = Self::relu_pool(tape, m_s)?;
            q = Self::relu_pool(tape, m_q)?;
        }
        Ok((Self::flatten(tape, s)?, Self::flatten(tape, q)?))
    }

    /// Similarity matrix `[Q, S]` of `cosine_u(query, support)`.
    pub fn similarities(&mut self, tape: &mut Tape<T>, support: Var, query: Var) -> Result<Var> {
        let layout = PairLayout {
            supports: tape.shape(support)[0],
            queries: tape.shape(query)[0],
        };
        let (f_s, f_q) = match self.net.kind() {
            ModelKind::Baseline => {
                let e_s = self.embed_baseline(tape, support)?;
                let e_q = self.embed_baseline(tape, query)?;
                (
                    tape.gather_rows(e_s, &layout.support_index())?,
                    tape.gather_rows(e_q, &layout.query_index())?,
                )
            }
            ModelKind::CrossMod => self.embed_crossmod(tape, support, query)?,
        };
        let sims = tape.row_cosine_u(f_q, f_s)?;
        tape.reshape(sims, &[layout.queries, layout.supports])
    }

    /// Per-query class distributions `[Q, way]`.
    pub fn classify(
        &mut self,
        tape: &mut Tape<T>,
        support: Var,
        query: Var,
        support_labels: &[usize],
        way: usize,
    ) -> Result<Var> {
        if support_labels.len() != tape.shape(support)[0] {
            return Err(Error::Shape(format!(
                "{} support labels for {} support images",
                support_labels.len(),
                tape.shape(support)[0]
            )));
        }
        let sims = self.similarities(tape, support, query)?;
        vote(tape, sims, support_labels, way)
    }
}

/// Class distributions `[T, way]` for every query of an episode, without
/// recording gradients. In [`BnMode::Eval`] the cross-modulated pair batch is
/// processed a few queries at a time.
pub fn classify_episode<T: Scalar>(
    net: &Network<T>,
    episode: &Episode,
    bn: BnMode,
    noise: Option<&PostMultiplierNoise<T>>,
) -> Result<Tensor<T>> {
    let labels = episode.support_labels();
    let support = episode.support_batch::<T>();
    let total = episode.query.len();
    if total == 0 {
        return Ok(Tensor::zeros([0, episode.way]));
    }
    let chunk = if bn == BnMode::Eval && net.kind() == ModelKind::CrossMod {
        EVAL_QUERY_CHUNK
    } else {
        total
    };
    let mut out = Vec::with_capacity(total * episode.way);
    for queries in episode.query.chunks(chunk) {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false, noise)?;
        let s = tape.constant(support.clone());
        let q = tape.constant(batch_of(queries));
        let mut fwd = Forward::new(net, &bound, bn);
        let probs = fwd.classify(&mut tape, s, q, &labels, episode.way)?;
        out.extend_from_slice(tape.value(probs).data());
    }
    Tensor::new([total, episode.way], out)
}
