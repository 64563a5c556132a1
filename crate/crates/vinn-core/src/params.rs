//! Named parameter storage shared by the model, optimizer, and checkpoint
//! code. Insertion order is fixed by the deterministic build traversal, so
//! parameter ids, optimizer state, and checkpoint layout all agree.

use crate::tensor::{FeatureMap, Real};
use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Index of a tensor within a [`ParamStore`].
pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub value: FeatureMap<T>,
    /// False for batch-norm running statistics: checkpointed but never
    /// touched by the optimizer.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: FeatureMap<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, trainable });
        id
    }

    pub fn get(&self, id: ParamId) -> &FeatureMap<T> {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut FeatureMap<T> {
        &mut self.entries[id].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate()
    }

    /// Number of scalars the optimizer updates.
    pub fn trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Element-type conversion for the 64-bit shadow path.
    pub fn convert<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.value.mapv(|v| U::from_f64(v.to_f64())), e.trainable);
        }
        out
    }
}

/// He-style normal initialization for a convolution weight of shape
/// (c_out, c_in, kh, kw): std = sqrt(2 / fan_in).
pub fn he_init<T: Real>(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize, usize),
) -> FeatureMap<T> {
    let fan_in = (shape.1 * shape.2 * shape.3) as f64;
    let std = (2.0 / fan_in).sqrt();
    let mut w = Array4::zeros(shape);
    for v in w.iter_mut() {
        // Box-Muller keeps the draw sequence identical across element types.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        *v = T::from_f64(z * std);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn insertion_order_is_id_order() {
        let mut p = ParamStore::<f32>::new();
        let a = p.insert("a", Array4::zeros((1, 1, 1, 1)), true);
        let b = p.insert("b", Array4::zeros((1, 2, 1, 1)), false);
        assert_eq!((a, b), (0, 1));
        assert_eq!(p.id_of("b"), Some(1));
        assert_eq!(p.trainable_scalars(), 1);
    }

    #[test]
    fn he_init_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let w1: FeatureMap<f32> = he_init(&mut r1, (4, 3, 3, 3));
        let w2: FeatureMap<f32> = he_init(&mut r2, (4, 3, 3, 3));
        assert_eq!(w1, w2);
        let w3: FeatureMap<f64> = he_init(&mut ChaCha8Rng::seed_from_u64(5), (4, 3, 3, 3));
        assert!(w1.iter().zip(w3.iter()).all(|(&a, &b)| (a as f64 - b).abs() < 1e-7));
    }
}
