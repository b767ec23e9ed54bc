//! A server's runtime state for one session.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::dealer::PartyMaterial;
use crate::numeric::{FixedPointConfig, Fx};
use crate::sharing::{PartyId, ShareDistribution};
use crate::transport::Session;

/// One value reconstructed in the clear during a protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct Reveal {
    pub protocol: &'static str,
    pub label: &'static str,
    pub values: Vec<Fx>,
}

pub struct Party {
    pub id: PartyId,
    pub cfg: FixedPointConfig,
    pub dist: ShareDistribution,
    pub session: Session,
    pub material: PartyMaterial,
    seed: u64,
    rng: ChaCha20Rng,
    reveals: Option<Vec<Reveal>>,
}

impl Party {
    pub fn new(
        id: PartyId,
        cfg: FixedPointConfig,
        session: Session,
        material: PartyMaterial,
        rng_seed: u64,
    ) -> Party {
        Party {
            id,
            cfg,
            dist: ShareDistribution::default(),
            session,
            material,
            seed: rng_seed,
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            reveals: None,
        }
    }

    /// Party-local randomness (masks chosen by this server alone).
    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    /// A private stream dedicated to one purpose, reproducible from the
    /// party seed alone.
    pub fn sub_rng(&self, label: &str) -> ChaCha20Rng {
        sub_rng(self.seed, label)
    }

    pub fn record_reveals(&mut self) {
        self.reveals = Some(Vec::new());
    }

    pub fn note_reveal(&mut self, protocol: &'static str, label: &'static str, values: &[Fx]) {
        if let Some(r) = self.reveals.as_mut() {
            r.push(Reveal {
                protocol,
                label,
                values: values.to_vec(),
            });
        }
    }

    pub fn reveals(&self) -> &[Reveal] {
        self.reveals.as_deref().unwrap_or(&[])
    }

    pub fn take_reveals(&mut self) -> Vec<Reveal> {
        self.reveals.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Distinct `(protocol, label)` pairs seen so far.
    pub fn reveal_set(&self) -> BTreeSet<(&'static str, &'static str)> {
        self.reveals().iter().map(|r| (r.protocol, r.label)).collect()
    }

    pub fn is_first(&self) -> bool {
        self.id.is_first()
    }

    /// 1.0 on P1, 0.0 on P2: the share of a public constant 1.
    pub fn one(&self) -> Fx {
        if self.is_first() {
            1.0
        } else {
            0.0
        }
    }
}

/// The stream `Party::sub_rng(label)` returns for a party seeded with `seed`.
pub fn sub_rng(seed: u64, label: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}
