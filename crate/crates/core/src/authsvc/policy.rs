use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AuthError;
use crate::eval::{permutations_of, EvalReport};

/// Digits used for one-time passwords when no report says otherwise.
pub const BEST_OTP_DIGITS: [u8; 7] = [1, 2, 3, 4, 5, 8, 9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Pin,
    Otp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasswordPolicy {
    pub kind: PolicyKind,
    pub length: usize,
    pub allowed_digits: BTreeSet<u8>,
    pub allow_repetition: bool,
    /// Keep only passwords whose multiset EER lies in `[lo, hi]` percent.
    #[serde(default)]
    pub eer_band: Option<(f64, f64)>,
}

impl PasswordPolicy {
    /// Four digits, any digit, repeats allowed.
    pub fn pin() -> Self {
        Self {
            kind: PolicyKind::Pin,
            length: 4,
            allowed_digits: (0..10).collect(),
            allow_repetition: true,
            eer_band: None,
        }
    }

    /// Seven distinct digits from [`BEST_OTP_DIGITS`].
    pub fn otp() -> Self {
        Self {
            kind: PolicyKind::Otp,
            length: 7,
            allowed_digits: BEST_OTP_DIGITS.into_iter().collect(),
            allow_repetition: false,
            eer_band: None,
        }
    }

    pub fn default_for(kind: PolicyKind) -> Self {
        match kind {
            PolicyKind::Pin => Self::pin(),
            PolicyKind::Otp => Self::otp(),
        }
    }

    pub fn validate(&self) -> Result<(), AuthError> {
        if self.length == 0 {
            return Err(AuthError::InvalidPolicy("length must be at least 1".into()));
        }
        if let Some(&d) = self.allowed_digits.iter().find(|&&d| d > 9) {
            return Err(AuthError::InvalidPolicy(format!("digit {d} outside 0..=9")));
        }
        if let Some((lo, hi)) = self.eer_band {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(AuthError::InvalidPolicy(format!("empty EER band [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Checks a user-chosen password against the policy.
    pub fn accepts(&self, password: &[u8], table: Option<&MultisetTable>) -> Result<bool, AuthError> {
        self.validate()?;
        if password.len() != self.length || !password.iter().all(|d| self.allowed_digits.contains(d)) {
            return Ok(false);
        }
        if !self.allow_repetition && password.iter().collect::<BTreeSet<_>>().len() != password.len() {
            return Ok(false);
        }
        match self.eer_band {
            None => Ok(true),
            Some((lo, hi)) => {
                let table = band_table(self, table)?;
                let mut key = password.to_vec();
                key.sort_unstable();
                Ok(table.0.get(&key).is_some_and(|&e| e >= lo && e <= hi))
            }
        }
    }
}

/// EER of every password multiset of one length, taken from an evaluation
/// report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MultisetTable(pub BTreeMap<Vec<u8>, f64>);

impl MultisetTable {
    pub fn from_report(report: &EvalReport) -> Result<Self, AuthError> {
        let rows = report
            .multiset_eers
            .as_ref()
            .ok_or(AuthError::IncompleteReport("multiset EER table"))?;
        Ok(Self(
            rows.iter()
                .map(|m| {
                    let mut k = m.digits.clone();
                    k.sort_unstable();
                    (k, m.eer)
                })
                .collect(),
        ))
    }

    pub fn length(&self) -> Option<usize> {
        self.0.keys().next().map(Vec::len)
    }
}

fn band_table<'a>(policy: &PasswordPolicy, table: Option<&'a MultisetTable>) -> Result<&'a MultisetTable, AuthError> {
    let table = table.ok_or(AuthError::IncompleteReport("multiset EER table"))?;
    if table.length() != Some(policy.length) {
        return Err(AuthError::InvalidPolicy(format!(
            "EER table covers length {:?}, policy asks for {}",
            table.length(),
            policy.length
        )));
    }
    Ok(table)
}

/// Multisets admitted by a banded policy, with their ordering counts.
fn band_candidates(policy: &PasswordPolicy, table: &MultisetTable) -> Vec<(Vec<u8>, u128)> {
    let (lo, hi) = policy.eer_band.expect("banded policy");
    table
        .0
        .iter()
        .filter(|(m, &e)| {
            e >= lo
                && e <= hi
                && m.iter().all(|d| policy.allowed_digits.contains(d))
                && (policy.allow_repetition || m.windows(2).all(|w| w[0] != w[1]))
        })
        .map(|(m, _)| (m.clone(), permutations_of(m)))
        .collect()
}

/// Number of ordered passwords the policy can produce.
pub fn count_candidates(policy: &PasswordPolicy, table: Option<&MultisetTable>) -> Result<u128, AuthError> {
    policy.validate()?;
    if policy.eer_band.is_some() {
        let table = band_table(policy, table)?;
        return Ok(band_candidates(policy, table).iter().map(|(_, n)| n).sum());
    }
    let k = policy.allowed_digits.len() as u128;
    let l = policy.length as u32;
    Ok(if policy.allow_repetition {
        k.checked_pow(l).unwrap_or(u128::MAX)
    } else if (l as u128) > k {
        0
    } else {
        (0..l as u128).map(|i| k - i).product()
    })
}

/// Uniform draw over the policy's candidate passwords.
pub fn generate_password(
    policy: &PasswordPolicy,
    table: Option<&MultisetTable>,
    seed: Option<u64>,
) -> Result<Vec<u8>, AuthError> {
    if count_candidates(policy, table)? == 0 {
        return Err(AuthError::EmptyCandidateSet);
    }
    let mut rng = match seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => ChaCha8Rng::from_entropy(),
    };
    let digits: Vec<u8> = policy.allowed_digits.iter().copied().collect();
    if policy.eer_band.is_some() {
        let table = band_table(policy, table)?;
        let cands = band_candidates(policy, table);
        let total: u128 = cands.iter().map(|(_, n)| n).sum();
        // Pick a multiset in proportion to its orderings, then one ordering
        // uniformly; every ordered password is equally likely.
        let mut pick = rng.gen_range(0..total);
        for (m, n) in cands {
            if pick < n {
                let mut out = m;
                out.shuffle(&mut rng);
                return Ok(out);
            }
            pick -= n;
        }
        unreachable!("pick below total");
    }
    if policy.allow_repetition {
        Ok((0..policy.length)
            .map(|_| digits[rng.gen_range(0..digits.len())])
            .collect())
    } else {
        let mut pool = digits;
        let (chosen, _) = pool.partial_shuffle(&mut rng, policy.length);
        Ok(chosen.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        assert_eq!(count_candidates(&PasswordPolicy::pin(), None).unwrap(), 10_000);
        assert_eq!(count_candidates(&PasswordPolicy::otp(), None).unwrap(), 5040);
    }

    #[test]
    fn empty_candidate_set() {
        let p = PasswordPolicy {
            kind: PolicyKind::Pin,
            length: 2,
            allowed_digits: [5].into_iter().collect(),
            allow_repetition: false,
            eer_band: None,
        };
        assert_eq!(count_candidates(&p, None).unwrap(), 0);
        assert_eq!(generate_password(&p, None, Some(1)), Err(AuthError::EmptyCandidateSet));
    }

    #[test]
    fn otp_draws_are_valid_and_seeded() {
        let p = PasswordPolicy::otp();
        let a = generate_password(&p, None, Some(42)).unwrap();
        assert_eq!(a, generate_password(&p, None, Some(42)).unwrap());
        assert!(p.accepts(&a, None).unwrap());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, BEST_OTP_DIGITS.to_vec());
    }

    #[test]
    fn band_filter() {
        let table = MultisetTable(
            [(vec![1, 1], 2.0), (vec![1, 2], 6.0), (vec![2, 2], 12.0)]
                .into_iter()
                .collect(),
        );
        let mut p = PasswordPolicy::pin();
        p.length = 2;
        p.allowed_digits = [1, 2].into_iter().collect();
        p.eer_band = Some((5.0, 10.0));
        assert_eq!(count_candidates(&p, Some(&table)).unwrap(), 2);
        for seed in 0..20 {
            let pw = generate_password(&p, Some(&table), Some(seed)).unwrap();
            assert!(pw == vec![1, 2] || pw == vec![2, 1]);
        }
        assert!(p.accepts(&[2, 1], Some(&table)).unwrap());
        assert!(!p.accepts(&[1, 1], Some(&table)).unwrap());
        assert!(matches!(count_candidates(&p, None), Err(AuthError::IncompleteReport(_))));
        p.length = 3;
        assert!(matches!(count_candidates(&p, Some(&table)), Err(AuthError::InvalidPolicy(_))));
    }

    #[test]
    fn invalid_policies() {
        let mut p = PasswordPolicy::pin();
        p.length = 0;
        assert!(p.validate().is_err());
        let mut p = PasswordPolicy::pin();
        p.allowed_digits.insert(12);
        assert!(p.validate().is_err());
    }

    #[test]
    fn user_chosen_pin() {
        let p = PasswordPolicy::pin();
        assert!(p.accepts(&[0, 0, 7, 3], None).unwrap());
        assert!(!p.accepts(&[0, 7, 3], None).unwrap());
        assert!(!PasswordPolicy::otp().accepts(&[1, 1, 2, 3, 4, 5, 8], None).unwrap());
    }
}
