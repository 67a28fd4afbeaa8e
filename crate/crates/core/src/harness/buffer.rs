use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Example;
use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferItem {
    pub example: Example,
    pub task: usize,
}

/// Real examples kept from earlier tasks.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    items: Vec<BufferItem>,
}

/// Round half up of `p · n`.
pub fn buffer_quota(p: f64, n: usize) -> usize {
    (p * n as f64 + 0.5).floor() as usize
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[BufferItem] {
        &self.items
    }

    /// Stores `round(p·|data|)` examples of task `task`: an equal share per
    /// class, the remainder from randomly chosen classes. Returns the number
    /// stored.
    pub fn update<R: Rng>(&mut self, data: &[Example], task: usize, p: f64, rng: &mut R) -> Result<usize> {
        if !(0.0..=1.0).contains(&p) {
            return contract(format!("buffer fraction {p} outside [0, 1]"));
        }
        let quota = buffer_quota(p, data.len());
        if quota == 0 {
            return Ok(0);
        }
        let mut by_class: BTreeMap<&str, Vec<&Example>> = BTreeMap::new();
        for e in data {
            by_class.entry(e.label.as_str()).or_default().push(e);
        }
        let mut pools: Vec<Vec<&Example>> = by_class.into_values().collect();
        for p in &mut pools {
            p.shuffle(rng);
        }
        let k = pools.len();
        let mut take = vec![quota / k; k];
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(rng);
        for &c in order.iter().take(quota % k) {
            take[c] += 1;
        }
        // a class too small for its share hands the rest to the others
        let mut spare = 0;
        for (c, t) in take.iter_mut().enumerate() {
            if *t > pools[c].len() {
                spare += *t - pools[c].len();
                *t = pools[c].len();
            }
        }
        for &c in order.iter().cycle().take(k * quota) {
            if spare == 0 {
                break;
            }
            if take[c] < pools[c].len() {
                take[c] += 1;
                spare -= 1;
            }
        }
        let before = self.items.len();
        for (pool, t) in pools.iter().zip(&take) {
            self.items.extend(pool[..*t].iter().map(|e| BufferItem {
                example: (*e).clone(),
                task,
            }));
        }
        Ok(self.items.len() - before)
    }
}
