//! In-process two-party harness: both servers on scoped threads, joined by
//! an in-memory channel and fed from one dealer.

use crate::dealer::{Dealer, MaterialPlan};
use crate::error::{Error, Result};
use crate::numeric::FixedPointConfig;
use crate::party::Party;
use crate::sharing::PartyId;
use crate::transport::Session;

/// A value held per party: `.0` for P1, `.1` for P2.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair<T>(pub T, pub T);

impl<T> Pair<T> {
    pub fn get(&self, id: PartyId) -> &T {
        match id {
            PartyId::P1 => &self.0,
            PartyId::P2 => &self.1,
        }
    }
}

/// This party's half of `pair`.
pub fn shares_of<'a, T>(p: &Party, pair: &'a Pair<T>) -> &'a T {
    pair.get(p.id)
}

/// Private RNG seeds of the two parties built by [`make_parties`].
pub fn party_seeds(dealer_seed: u64) -> (u64, u64) {
    let base = dealer_seed.wrapping_mul(2);
    (base.wrapping_add(1), base.wrapping_add(2))
}

/// Build both parties for a session with fresh material.
pub fn make_parties(
    cfg: FixedPointConfig,
    plan: &MaterialPlan,
    dealer_seed: u64,
) -> Result<(Party, Party)> {
    let (m1, m2) = Dealer::new(dealer_seed, cfg).generate(plan)?;
    let (s1, s2) = Session::pair_in_process(dealer_seed);
    let (r1, r2) = party_seeds(dealer_seed);
    Ok((
        Party::new(PartyId::P1, cfg, s1, m1, r1),
        Party::new(PartyId::P2, cfg, s2, m2, r2),
    ))
}

fn first_failure<T>(a: Result<T>, b: Result<T>) -> Result<(T, T)> {
    match (a, b) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        // report the real failure, not the peer's reaction to it
        (Err(Error::PeerClosed), Err(e)) => Err(e),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Run `f` on both parties concurrently and return both results.
pub fn run_parties<T, F>(p1: &mut Party, p2: &mut Party, f: F) -> Result<(T, T)>
where
    T: Send,
    F: Fn(&mut Party) -> Result<T> + Sync,
{
    let (a, b) = std::thread::scope(|s| {
        let f = &f;
        let h = s.spawn(move || f(p2));
        let a = f(p1);
        (a, h.join().expect("party thread panicked"))
    });
    first_failure(a, b)
}

pub fn run_pair_with<T, F>(cfg: FixedPointConfig, plan: &MaterialPlan, dealer_seed: u64, f: F) -> Result<(T, T)>
where
    T: Send,
    F: Fn(&mut Party) -> Result<T> + Sync,
{
    let (mut p1, mut p2) = make_parties(cfg, plan, dealer_seed)?;
    // each party is dropped as soon as it finishes, so a failure closes the
    // channel and the peer does not sit out the timeout
    let (a, b) = std::thread::scope(|s| {
        let f = &f;
        let h = s.spawn(move || {
            let r = f(&mut p2);
            drop(p2);
            r
        });
        let a = f(&mut p1);
        drop(p1);
        (a, h.join().expect("party thread panicked"))
    });
    first_failure(a, b)
}

pub fn run_pair<T, F>(plan: &MaterialPlan, dealer_seed: u64, f: F) -> Result<(T, T)>
where
    T: Send,
    F: Fn(&mut Party) -> Result<T> + Sync,
{
    run_pair_with(FixedPointConfig::default(), plan, dealer_seed, f)
}
