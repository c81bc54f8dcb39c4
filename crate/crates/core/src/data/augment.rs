use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PromptDatabase, PromptPair};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Per-slot substitution probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Probability that a slot is replaced by the query pair.
    pub p_query: f64,
    /// Probability that a slot is replaced by a random database pair.
    pub p_random: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_query: 0.3,
            p_random: 0.15,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled(seed: u64) -> Self {
        AugmentConfig {
            p_query: 0.0,
            p_random: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.p_query) || !ok(self.p_random) || self.p_query + self.p_random > 1.0 {
            return Err(Error::Config(format!(
                "augment probabilities must lie in [0,1] and sum to at most 1 (p_q={}, p_r={})",
                self.p_query, self.p_random
            )));
        }
        Ok(())
    }
}

/// Substitutes prompt slots independently: with probability `p_query` by the
/// query pair, with probability `p_random` by a uniformly drawn database pair
/// other than the incumbent, otherwise kept. `key` selects the random stream
/// (e.g. the global example index), so results depend only on
/// `(cfg.seed, key, slot)`.
pub fn augment<'a>(
    prompts: &[&'a PromptPair],
    query: &'a PromptPair,
    db: &'a PromptDatabase,
    cfg: &AugmentConfig,
    mode: Mode,
    key: u64,
) -> Result<Vec<&'a PromptPair>> {
    if mode != Mode::Train {
        return Err(Error::Mode);
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(key);
    let mut out = Vec::with_capacity(prompts.len());
    for &slot in prompts {
        let u: f64 = rng.random();
        if u < cfg.p_query {
            out.push(query);
        } else if u < cfg.p_query + cfg.p_random && !db.is_empty() {
            let incumbent = db.position(slot.id);
            let pick = match incumbent {
                Some(_) if db.len() == 1 => None,
                Some(inc) => {
                    let j = rng.random_range(0..db.len() - 1);
                    Some(if j >= inc { j + 1 } else { j })
                }
                None => Some(rng.random_range(0..db.len())),
            };
            out.push(pick.map_or(slot, |j| db.get(j)));
        } else {
            out.push(slot);
        }
    }
    Ok(out)
}
