//! Normalized function matrices for every sample of a dataset.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::capture::{Dataset, SampleKey};
use crate::features::{sample_features, FeatureError, FunctionMatrix};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureBank {
    matrices: BTreeMap<SampleKey, FunctionMatrix>,
    /// Samples whose extraction failed.
    pub failures: Vec<(SampleKey, FeatureError)>,
}

impl FeatureBank {
    /// Preprocesses, extracts and normalizes every sample in parallel.
    pub fn build(ds: &Dataset) -> Self {
        let samples: Vec<_> = ds.samples().collect();
        let results: Vec<(SampleKey, Result<FunctionMatrix, FeatureError>)> = samples
            .par_iter()
            .map(|s| (s.key.clone(), sample_features(s)))
            .collect();
        let mut bank = FeatureBank::default();
        for (key, r) in results {
            match r {
                Ok(m) => {
                    bank.matrices.insert(key, m);
                }
                Err(e) => bank.failures.push((key, e)),
            }
        }
        bank
    }

    pub fn get(&self, key: &SampleKey) -> Option<&FunctionMatrix> {
        self.matrices.get(key)
    }

    pub fn lookup(&self, user: &str, digit: u8, session: u8, repetition: u8) -> Option<&FunctionMatrix> {
        self.matrices
            .get(&SampleKey::new(user, digit, session, repetition))
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}
