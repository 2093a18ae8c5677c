//! Seeded synthetic CTR data with planted, module-attributable signals.
//!
//! The generative model and every random draw are pinned down in
//! `docs/DATA_FORMAT.md` so other implementations can reproduce a file
//! byte for byte. In short: ChaCha20 (rand_chacha, `seed_from_u64`), stream 0
//! for the global tables and stream `i + 1` for instance `i`; all draws are
//! derived from raw `next_u64` words.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::{FieldValue, RawInstance};
use crate::embedding::{FieldSpec, Group, Schema};
use crate::error::{MianError, Result};
use crate::numerics::sigmoid;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_instances: usize,
    pub n_items: usize,
    pub n_categories: usize,
    /// Vocabulary of each categorical user field; field 0 keys the affinity table.
    pub user_vocab: Vec<usize>,
    /// Appends one numerical user field drawn uniformly from `[0, 1)`.
    pub user_numeric: bool,
    /// Vocabulary of each context field; field 0 keys the season table.
    pub context_vocab: Vec<usize>,
    pub seq_len: usize,
    /// Rank of the latent-factor affinity and season tables.
    pub cross_rank: usize,
    pub w_beh: f64,
    pub w_user: f64,
    pub w_ctx: f64,
    pub noise_std: f64,
    /// Probability that a user has only 0..=3 behaviors.
    pub inactive_fraction: f64,
    /// Interest categories per user.
    pub interests: usize,
    /// Probability a behavior comes from the user's interests rather than uniformly.
    pub interest_focus: f64,
    /// Probability the candidate comes from the user's interests.
    pub candidate_interest: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_instances: 62_500,
            n_items: 2_000,
            n_categories: 40,
            user_vocab: vec![12, 8, 3, 20, 30],
            user_numeric: true,
            context_vocab: vec![4, 7, 24, 3],
            seq_len: 30,
            cross_rank: 1,
            w_beh: 1.5,
            w_user: 1.5,
            w_ctx: 1.5,
            noise_std: 0.5,
            inactive_fraction: 0.4,
            interests: 2,
            interest_focus: 0.8,
            candidate_interest: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn num_user_fields(&self) -> usize {
        self.user_vocab.len() + usize::from(self.user_numeric)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(MianError::Config(m.to_string()));
        if self.n_instances == 0 {
            return fail("n_instances must be at least 1");
        }
        if self.n_categories == 0 || self.n_items < self.n_categories {
            return fail("need at least one category and one item per category");
        }
        if self.user_vocab.is_empty() || self.context_vocab.is_empty() {
            return fail("need at least one categorical user field and one context field");
        }
        if self.user_vocab.contains(&0) || self.context_vocab.contains(&0) {
            return fail("vocabulary sizes must be positive");
        }
        if self.seq_len == 0 || self.interests == 0 || self.cross_rank == 0 {
            return fail("seq_len, interests and cross_rank must be positive");
        }
        let weights = [self.w_beh, self.w_user, self.w_ctx, self.noise_std];
        if weights.iter().any(|w| !w.is_finite()) || self.noise_std < 0.0 {
            return fail("signal weights must be finite and noise_std nonnegative");
        }
        for p in [self.inactive_fraction, self.interest_focus, self.candidate_interest] {
            if !(0.0..=1.0).contains(&p) {
                return fail("probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        let mut user: Vec<FieldSpec> = self
            .user_vocab
            .iter()
            .enumerate()
            .map(|(j, &v)| FieldSpec::categorical(&format!("u{j}"), v, Group::User))
            .collect();
        if self.user_numeric {
            user.push(FieldSpec::numerical(&format!("u{}", self.user_vocab.len()), Group::User));
        }
        Schema {
            seq_len: self.seq_len,
            item: vec![
                FieldSpec::categorical("item_id", self.n_items, Group::Item),
                FieldSpec::categorical("item_cat", self.n_categories, Group::Item),
            ],
            behavior: vec![
                FieldSpec::categorical("item_id", self.n_items, Group::Behavior),
                FieldSpec::categorical("item_cat", self.n_categories, Group::Behavior),
            ],
            user,
            context: self
                .context_vocab
                .iter()
                .enumerate()
                .map(|(k, &v)| FieldSpec::categorical(&format!("c{k}"), v, Group::Context))
                .collect(),
        }
    }
}

/// The draw primitives, all defined on raw 64-bit outputs.
pub struct Draws(ChaCha20Rng);

impl Draws {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// `(x >> 11) * 2^-53`, in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// `floor(x * n / 2^64)`, in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.0.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Box-Muller cosine branch on `(1 - u1, u2)`.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Tables drawn once per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldTables {
    pub item_category: Vec<usize>,
    pub items_by_category: Vec<Vec<usize>>,
    /// `user_vocab[0] x n_categories`, row-major.
    pub affinity: Vec<f64>,
    /// `context_vocab[0] x n_categories`, row-major.
    pub season: Vec<f64>,
}

impl WorldTables {
    pub fn draw(cfg: &SynthConfig) -> Self {
        let mut g = Draws::new(cfg.seed, 0);
        let c = cfg.n_categories;
        let item_category: Vec<usize> = (0..cfg.n_items).map(|i| if i < c { i } else { g.below(c) }).collect();
        let mut items_by_category = vec![Vec::new(); c];
        for (i, &cat) in item_category.iter().enumerate() {
            items_by_category[cat].push(i);
        }
        let affinity = low_rank(&mut g, cfg.user_vocab[0], c, cfg.cross_rank);
        let season = low_rank(&mut g, cfg.context_vocab[0], c, cfg.cross_rank);
        Self {
            item_category,
            items_by_category,
            affinity,
            season,
        }
    }

    pub fn affinity(&self, cfg: &SynthConfig, user_key: usize, category: usize) -> f64 {
        self.affinity[user_key * cfg.n_categories + category]
    }

    pub fn season(&self, cfg: &SynthConfig, context_key: usize, category: usize) -> f64 {
        self.season[context_key * cfg.n_categories + category]
    }
}

/// `F G^T / sqrt(rank)` with standard normal factors, so entries have unit variance.
fn low_rank(g: &mut Draws, rows: usize, cols: usize, rank: usize) -> Vec<f64> {
    let f: Vec<f64> = (0..rows * rank).map(|_| g.normal()).collect();
    let h: Vec<f64> = (0..cols * rank).map(|_| g.normal()).collect();
    let norm = (rank as f64).sqrt();
    (0..rows * cols)
        .map(|ij| {
            let (i, j) = (ij / cols, ij % cols);
            (0..rank).map(|r| f[i * rank + r] * h[j * rank + r]).sum::<f64>() / norm
        })
        .collect()
}

/// Latent variables behind one instance, kept for analysis and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub matched: bool,
    pub logit: f64,
}

/// Draws instance `index` from its own stream.
pub fn generate_one(cfg: &SynthConfig, world: &WorldTables, index: u64) -> (RawInstance, Latent) {
    let mut g = Draws::new(cfg.seed, index + 1);
    let c = cfg.n_categories;

    let mut user: Vec<FieldValue> = cfg.user_vocab.iter().map(|&v| FieldValue::Cat(g.below(v))).collect();
    if cfg.user_numeric {
        user.push(FieldValue::Num(g.uniform()));
    }
    let context: Vec<FieldValue> = cfg.context_vocab.iter().map(|&v| FieldValue::Cat(g.below(v))).collect();
    let interests: Vec<usize> = (0..cfg.interests).map(|_| g.below(c)).collect();

    let t = cfg.seq_len;
    let inactive = g.uniform() < cfg.inactive_fraction;
    let len = if inactive {
        g.below(t.min(3) + 1)
    } else {
        let lo = t.min(4);
        lo + g.below(t - lo + 1)
    };
    let pick = |g: &mut Draws, p_interest: f64| -> (usize, usize) {
        let cat = if g.uniform() < p_interest {
            interests[g.below(interests.len())]
        } else {
            g.below(c)
        };
        let pool = &world.items_by_category[cat];
        (pool[g.below(pool.len())], cat)
    };
    let behaviors: Vec<(usize, usize)> = (0..len).map(|_| pick(&mut g, cfg.interest_focus)).collect();
    let (item, cat) = pick(&mut g, cfg.candidate_interest);
    let noise = g.normal() * cfg.noise_std;

    let matched = behaviors.iter().any(|&(_, bc)| bc == cat);
    let user_key = user[0].as_cat().unwrap();
    let ctx_key = context[0].as_cat().unwrap();
    let logit = cfg.w_beh * f64::from(u8::from(matched))
        + cfg.w_user * world.affinity(cfg, user_key, cat)
        + cfg.w_ctx * world.season(cfg, ctx_key, cat)
        + noise;
    let label = u8::from(g.uniform() < sigmoid(logit));

    let raw = RawInstance {
        label,
        item: vec![FieldValue::Cat(item), FieldValue::Cat(cat)],
        behaviors: behaviors
            .into_iter()
            .map(|(i, bc)| vec![FieldValue::Cat(i), FieldValue::Cat(bc)])
            .collect(),
        user,
        context,
    };
    (raw, Latent { matched, logit })
}

/// Generates the whole dataset in index order.
pub fn generate(cfg: &SynthConfig) -> Result<(Schema, Vec<RawInstance>)> {
    let (schema, rows) = generate_with_latents(cfg)?;
    Ok((schema, rows.into_iter().map(|(r, _)| r).collect()))
}

pub fn generate_with_latents(cfg: &SynthConfig) -> Result<(Schema, Vec<(RawInstance, Latent)>)> {
    cfg.validate()?;
    let world = WorldTables::draw(cfg);
    let rows = (0..cfg.n_instances as u64).map(|i| generate_one(cfg, &world, i)).collect();
    Ok((cfg.schema(), rows))
}
