use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with per-key moments and step counts. A key whose length changes
/// (or that is new) starts again from zeroed moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<K: Ord> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: BTreeMap<K, Moments>,
}

impl<K: Ord + Clone> Adam<K> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, slots: BTreeMap::new() }
    }

    pub fn step(&mut self, key: &K, param: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(param.len(), grad.len());
        let slot = self.slots.entry(key.clone()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            t: 0,
        });
        if slot.m.len() != grad.len() {
            *slot = Moments { m: vec![0.0; grad.len()], v: vec![0.0; grad.len()], t: 0 };
        }
        slot.t += 1;
        let c1 = 1.0 - self.beta1.powi(slot.t as i32);
        let c2 = 1.0 - self.beta2.powi(slot.t as i32);
        for i in 0..grad.len() {
            let g = grad[i];
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = slot.m[i] / c1;
            let v_hat = slot.v[i] / c2;
            param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    pub fn steps(&self, key: &K) -> u64 {
        self.slots.get(key).map_or(0, |s| s.t)
    }

    /// Moment vector lengths, for shape checks.
    pub fn moment_len(&self, key: &K) -> Option<usize> {
        self.slots.get(key).map(|s| s.m.len())
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&K) -> bool) {
        self.slots.retain(|k, _| keep(k));
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}
