//! Named parameter collections with freezable groups.

use crate::autodiff::scalar::Scalar;
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

/// Which training group a parameter belongs to. The double-channel model
/// partitions all parameters into the network body (channels, fc7, head)
/// and the two fusion weights; each phase freezes one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Network,
    Fusion,
}

/// Per-group freeze flags for an SGD step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupMask {
    pub network_frozen: bool,
    pub fusion_frozen: bool,
}

impl GroupMask {
    pub fn none_frozen() -> Self {
        GroupMask {
            network_frozen: false,
            fusion_frozen: false,
        }
    }

    pub fn frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Network => self.network_frozen,
            ParamGroup::Fusion => self.fusion_frozen,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<F: Scalar = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<F>,
}

/// Ordered collection of named parameters. Order is fixed at build time
/// and identical across identically seeded builds.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F: Scalar = f32> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<F>) {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor: tensor.with_requires_grad(true),
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<F>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<F>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<F>> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    /// Raw bytes of one group's parameters, for bitwise freeze assertions.
    pub fn group_fingerprint(&self, group: ParamGroup) -> Vec<u8>
    where
        F: bytemuck_like::ToLeBytes,
    {
        let mut out = Vec::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes_vec());
            }
        }
        out
    }
}

/// Vanilla SGD over non-frozen groups: p <- p - lr * grad(p).
/// Frozen parameters are left untouched (bit-identical). A non-frozen
/// parameter without a gradient is a structured error.
pub fn sgd_step<F: Scalar>(params: &mut ParamSet<F>, lr: F, mask: GroupMask) -> Result<()> {
    for e in params.iter_mut() {
        if mask.frozen(e.group) {
            continue;
        }
        e.tensor.sgd_update(lr, &e.name)?;
    }
    Ok(())
}

/// Minimal little-endian byte view used for bitwise freeze checks.
pub mod bytemuck_like {
    pub trait ToLeBytes {
        fn to_le_bytes_vec(&self) -> Vec<u8>;
    }
    impl ToLeBytes for f32 {
        fn to_le_bytes_vec(&self) -> Vec<u8> {
            self.to_le_bytes().to_vec()
        }
    }
    impl ToLeBytes for f64 {
        fn to_le_bytes_vec(&self) -> Vec<u8> {
            self.to_le_bytes().to_vec()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_set() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.push(
            "w",
            ParamGroup::Network,
            Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(),
        );
        p.push(
            "lambda",
            ParamGroup::Fusion,
            Tensor::from_vec(&[1], vec![0.5]).unwrap(),
        );
        p
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut p = small_set();
        for e in p.iter_mut() {
            let n = e.tensor.numel();
            e.tensor.set_grad(vec![1.0; n]);
        }
        let before: Vec<Vec<f32>> = p.iter().map(|e| e.tensor.data().to_vec()).collect();
        sgd_step(&mut p, 0.0, GroupMask::none_frozen()).unwrap();
        let after: Vec<Vec<f32>> = p.iter().map(|e| e.tensor.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn scalar_update_hand_value() {
        let mut p = ParamSet::new();
        p.push(
            "p",
            ParamGroup::Network,
            Tensor::from_vec(&[1], vec![1.0f32]).unwrap(),
        );
        p.get_mut("p").unwrap().tensor.set_grad(vec![2.0]);
        sgd_step(&mut p, 0.1, GroupMask::none_frozen()).unwrap();
        assert!((p.get("p").unwrap().tensor.data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn frozen_group_is_bitwise_invariant() {
        let mut p = small_set();
        for e in p.iter_mut() {
            let n = e.tensor.numel();
            e.tensor.set_grad(vec![1.0; n]);
        }
        let frozen_before = p.group_fingerprint(ParamGroup::Fusion);
        let mask = GroupMask {
            network_frozen: false,
            fusion_frozen: true,
        };
        for _ in 0..100 {
            sgd_step(&mut p, 0.01, mask).unwrap();
        }
        assert_eq!(frozen_before, p.group_fingerprint(ParamGroup::Fusion));
        // The live group did move.
        assert_ne!(p.get("w").unwrap().tensor.data(), &[1.0, 2.0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = small_set();
        let err = sgd_step(&mut p, 0.1, GroupMask::none_frozen());
        assert!(err.is_err());
        // But freezing the gradient-less groups makes it fine.
        let mask = GroupMask {
            network_frozen: true,
            fusion_frozen: true,
        };
        assert!(sgd_step(&mut p, 0.1, mask).is_ok());
    }
}
