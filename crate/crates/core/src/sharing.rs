//! Two-party additive shares and the local operations on them.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{truncate, FixedPointConfig, Fx};
use crate::party::Party;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartyId {
    P1,
    P2,
}

impl PartyId {
    pub fn index(self) -> usize {
        match self {
            PartyId::P1 => 0,
            PartyId::P2 => 1,
        }
    }

    pub fn peer(self) -> PartyId {
        match self {
            PartyId::P1 => PartyId::P2,
            PartyId::P2 => PartyId::P1,
        }
    }

    pub fn is_first(self) -> bool {
        self == PartyId::P1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Share {
    pub owner: PartyId,
    pub value: Fx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShareVector {
    pub owner: PartyId,
    pub values: Vec<Fx>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShareMatrix {
    pub owner: PartyId,
    pub values: DMatrix<Fx>,
}

impl Share {
    pub fn new(owner: PartyId, value: Fx) -> Self {
        Self { owner, value }
    }
}

impl ShareVector {
    pub fn new(owner: PartyId, values: Vec<Fx>) -> Self {
        Self { owner, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl ShareMatrix {
    pub fn new(owner: PartyId, values: DMatrix<Fx>) -> Self {
        Self { owner, values }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

/// Law of the exponent used when drawing a share magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShareDistribution {
    /// Magnitude log-uniform over the admissible share range.
    LogUniform,
    /// log2 of the magnitude normal with the given mean and deviation,
    /// clamped to the admissible range.
    LogNormal { mean: f64, std_dev: f64 },
}

impl Default for ShareDistribution {
    fn default() -> Self {
        ShareDistribution::LogUniform
    }
}

/// A random grid value in `F_s \ {0}` with a uniform sign.
pub fn sample_share<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &FixedPointConfig,
    dist: ShareDistribution,
) -> Fx {
    let lo = cfg.share_lower().log2();
    let hi = cfg.share_upper().log2();
    loop {
        let e = match dist {
            ShareDistribution::LogUniform => rng.gen_range(lo..hi),
            ShareDistribution::LogNormal { mean, std_dev } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                (mean + std_dev * z).clamp(lo, hi)
            }
        };
        let mag = truncate(e.exp2(), cfg);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let v = sign * mag;
        if crate::numeric::in_share_range(v, cfg) && v != 0.0 {
            return v;
        }
    }
}

fn check_secret(secret: Fx, cfg: &FixedPointConfig) -> Result<()> {
    let bound = cfg.secret_bound();
    if !secret.is_finite() || secret.abs() > bound {
        return Err(Error::SecretOutOfRange {
            value: secret,
            bound,
        });
    }
    Ok(())
}

fn split_with<R: Rng + ?Sized>(
    secret: Fx,
    rng: &mut R,
    cfg: &FixedPointConfig,
    dist: ShareDistribution,
    snap: bool,
) -> Result<(Fx, Fx)> {
    check_secret(secret, cfg)?;
    let target = if snap { truncate(secret, cfg) } else { secret };
    loop {
        let s1 = sample_share(rng, cfg, dist);
        let s2 = target - s1;
        let a = s2.abs();
        if s2 == 0.0 || (a > cfg.share_lower() && a < cfg.share_upper()) {
            return Ok((s1, s2));
        }
    }
}

/// Split a secret into two grid shares that both lie in `F_s`.
pub fn split_value<R: Rng + ?Sized>(
    secret: Fx,
    rng: &mut R,
    cfg: &FixedPointConfig,
    dist: ShareDistribution,
) -> Result<(Fx, Fx)> {
    split_with(secret, rng, cfg, dist, true)
}

/// Like [`split_value`] but the second share keeps the full carrier
/// precision, so the shares sum to `secret` exactly. Used for dealer values
/// that never cross the wire.
pub fn split_value_exact<R: Rng + ?Sized>(
    secret: Fx,
    rng: &mut R,
    cfg: &FixedPointConfig,
    dist: ShareDistribution,
) -> Result<(Fx, Fx)> {
    split_with(secret, rng, cfg, dist, false)
}

pub fn split<R: Rng + ?Sized>(
    secret: Fx,
    rng: &mut R,
    cfg: &FixedPointConfig,
) -> Result<(Share, Share)> {
    let (a, b) = split_value(secret, rng, cfg, ShareDistribution::default())?;
    Ok((Share::new(PartyId::P1, a), Share::new(PartyId::P2, b)))
}

pub fn split_vec<R: Rng + ?Sized>(
    secret: &[Fx],
    rng: &mut R,
    cfg: &FixedPointConfig,
) -> Result<(ShareVector, ShareVector)> {
    let mut a = Vec::with_capacity(secret.len());
    let mut b = Vec::with_capacity(secret.len());
    for &x in secret {
        let (s1, s2) = split_value(x, rng, cfg, ShareDistribution::default())?;
        a.push(s1);
        b.push(s2);
    }
    Ok((ShareVector::new(PartyId::P1, a), ShareVector::new(PartyId::P2, b)))
}

pub fn split_matrix<R: Rng + ?Sized>(
    secret: &DMatrix<Fx>,
    rng: &mut R,
    cfg: &FixedPointConfig,
) -> Result<(ShareMatrix, ShareMatrix)> {
    let (r, c) = secret.shape();
    let mut a = DMatrix::zeros(r, c);
    let mut b = DMatrix::zeros(r, c);
    for (i, &x) in secret.iter().enumerate() {
        let (s1, s2) = split_value(x, rng, cfg, ShareDistribution::default())?;
        a[i] = s1;
        b[i] = s2;
    }
    Ok((ShareMatrix::new(PartyId::P1, a), ShareMatrix::new(PartyId::P2, b)))
}

fn check_owners(a: PartyId, b: PartyId) -> Result<()> {
    if a == b {
        Err(Error::SameOwner)
    } else {
        Ok(())
    }
}

pub fn reconstruct(s1: &Share, s2: &Share, cfg: &FixedPointConfig) -> Result<Fx> {
    check_owners(s1.owner, s2.owner)?;
    Ok(truncate(s1.value + s2.value, cfg))
}

pub fn reconstruct_vec(
    s1: &ShareVector,
    s2: &ShareVector,
    cfg: &FixedPointConfig,
) -> Result<Vec<Fx>> {
    check_owners(s1.owner, s2.owner)?;
    if s1.len() != s2.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", s1.len(), s2.len())));
    }
    Ok(s1
        .values
        .iter()
        .zip(&s2.values)
        .map(|(a, b)| truncate(a + b, cfg))
        .collect())
}

pub fn reconstruct_matrix(
    s1: &ShareMatrix,
    s2: &ShareMatrix,
    cfg: &FixedPointConfig,
) -> Result<DMatrix<Fx>> {
    check_owners(s1.owner, s2.owner)?;
    if s1.shape() != s2.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            s1.shape(),
            s2.shape()
        )));
    }
    Ok((&s1.values + &s2.values).map(|x| truncate(x, cfg)))
}

/// `A · s · B · c` on one party's share. Needs no interaction: applying it to
/// both shares commutes with reconstruction.
pub fn local_linear(
    s: &ShareMatrix,
    a: &DMatrix<Fx>,
    b: &DMatrix<Fx>,
    c: Fx,
) -> Result<ShareMatrix> {
    let (r, k) = s.shape();
    if a.ncols() != r || b.nrows() != k {
        return Err(Error::ShapeMismatch(format!(
            "A {:?} · S {:?} · B {:?}",
            a.shape(),
            s.shape(),
            b.shape()
        )));
    }
    Ok(ShareMatrix::new(s.owner, a * &s.values * b * c))
}

/// Bring shares back into `F_s` before they are transmitted.
///
/// Overflowing shares are replaced by a fresh in-range value and the
/// difference is handed to the peer, who adds it to its own share. Shares
/// in `(0, 2^(delta-l_D)]` are set to zero. Both parties must call this
/// symmetrically; it costs one exchange.
pub fn normalize_shares(party: &mut Party, values: &mut [Fx]) -> Result<()> {
    let cfg = party.cfg;
    let dist = party.dist;
    let mut moved: Vec<(u32, Fx)> = Vec::new();
    for (i, v) in values.iter_mut().enumerate() {
        let a = v.abs();
        if a >= cfg.share_upper() {
            let fresh = sample_share(party.rng(), &cfg, dist);
            moved.push((i as u32, *v - fresh));
            *v = fresh;
        } else if a > 0.0 && a <= cfg.share_lower() {
            *v = 0.0;
        }
    }
    let mut payload = Vec::with_capacity(moved.len() * 12);
    for (i, d) in &moved {
        payload.extend_from_slice(&i.to_le_bytes());
        payload.extend_from_slice(&d.to_le_bytes());
    }
    let got = party.session.exchange(payload)?;
    if got.len() % 12 != 0 {
        return Err(Error::ProtocolViolation("bad normalization payload".into()));
    }
    for rec in got.chunks_exact(12) {
        let i = u32::from_le_bytes(rec[..4].try_into().unwrap()) as usize;
        let d = f64::from_le_bytes(rec[4..].try_into().unwrap());
        let slot = values
            .get_mut(i)
            .ok_or_else(|| Error::ProtocolViolation("normalization index out of range".into()))?;
        *slot += d;
    }
    Ok(())
}

pub fn normalize_share(party: &mut Party, s: &mut Share) -> Result<()> {
    let mut v = [s.value];
    normalize_shares(party, &mut v)?;
    s.value = v[0];
    Ok(())
}
