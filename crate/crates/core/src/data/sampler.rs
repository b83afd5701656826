//! 1:1 balanced minibatches across the two domains.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::Domain;

/// Reference to one sample of one domain's list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BatchItem {
    pub domain: Domain,
    pub index: usize,
}

/// `count` indices drawn as back-to-back shuffled passes over `0..len`.
fn cycled_order<R: Rng + ?Sized>(len: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut order = Vec::with_capacity(count + len);
    while order.len() < count {
        let mut pass: Vec<usize> = (0..len).collect();
        pass.shuffle(rng);
        order.extend(pass);
    }
    order.truncate(count);
    order
}

/// One epoch of batches, each with `batch_size / 2` samples per domain.
///
/// The epoch ends when every sample of the larger domain has been drawn
/// once; the smaller domain is oversampled in repeated shuffled passes,
/// and the last batch is topped up from a fresh pass when the larger
/// domain does not divide evenly.
pub fn balanced_batches<T, R: Rng + ?Sized>(
    mri: &[T],
    ct: &[T],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<BatchItem>>> {
    if batch_size == 0 || !batch_size.is_multiple_of(2) {
        return Err(Error::invalid(
            "batch_size",
            format!("{batch_size} must be a positive even number"),
        ));
    }
    if mri.is_empty() {
        return Err(Error::Empty("MRI sample list".into()));
    }
    if ct.is_empty() {
        return Err(Error::Empty("CT sample list".into()));
    }
    let half = batch_size / 2;
    let batches = mri.len().max(ct.len()).div_ceil(half);
    let mri_order = cycled_order(mri.len(), batches * half, rng);
    let ct_order = cycled_order(ct.len(), batches * half, rng);
    Ok((0..batches)
        .map(|b| {
            let mut batch: Vec<BatchItem> = mri_order[b * half..(b + 1) * half]
                .iter()
                .map(|&index| BatchItem {
                    domain: Domain::Mri,
                    index,
                })
                .chain(ct_order[b * half..(b + 1) * half].iter().map(|&index| BatchItem {
                    domain: Domain::Ct,
                    index,
                }))
                .collect();
            batch.shuffle(rng);
            batch
        })
        .collect())
}
