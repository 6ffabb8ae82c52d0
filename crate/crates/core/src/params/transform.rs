use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;

use super::{Layout, ParamSet};
use crate::error::{Error, Result};

/// User-supplied pair of mutually inverse maps.
#[derive(Clone)]
pub struct CustomTransform {
    pub name: String,
    pub to_est: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub from_est: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for CustomTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomTransform").field("name", &self.name).finish()
    }
}

/// Estimation-scale transform for one parameter.
#[derive(Clone, Debug)]
pub enum Transform {
    Identity,
    Log,
    Logit,
    /// Member of a group constrained to the simplex; the string is the group id.
    Barycentric(String),
    Custom(CustomTransform),
}

impl Transform {
    fn label(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Log => "log",
            Transform::Logit => "logit",
            Transform::Barycentric(_) => "barycentric",
            Transform::Custom(_) => "custom",
        }
    }

    fn scalar_to_est(&self, x: f64) -> Option<f64> {
        match self {
            Transform::Identity => x.is_finite().then_some(x),
            Transform::Log => (x > 0.0 && x.is_finite()).then(|| x.ln()),
            Transform::Logit => (x > 0.0 && x < 1.0).then(|| (x / (1.0 - x)).ln()),
            Transform::Custom(c) => {
                let v = (c.to_est)(x);
                v.is_finite().then_some(v)
            }
            Transform::Barycentric(_) => unreachable!("barycentric members are mapped as a group"),
        }
    }

    fn scalar_from_est(&self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::Log => v.exp(),
            Transform::Logit => 1.0 / (1.0 + (-v).exp()),
            Transform::Custom(c) => (c.from_est)(v),
            Transform::Barycentric(_) => unreachable!("barycentric members are mapped as a group"),
        }
    }
}

/// Per-parameter transform tags keyed by base name; absent names are identity.
#[derive(Clone, Debug, Default)]
pub struct TransformSpec {
    tags: IndexMap<String, Transform>,
}

impl TransformSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, transform: Transform) -> Self {
        self.tags.insert(name.to_string(), transform);
        self
    }

    /// Log transform for every listed name.
    pub fn log(names: &[&str]) -> Self {
        names.iter().fold(Self::new(), |s, n| s.with(n, Transform::Log))
    }

    pub fn get(&self, name: &str) -> &Transform {
        self.tags.get(name).unwrap_or(&Transform::Identity)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tags.keys().map(String::as_str)
    }

    /// Union of two tag sets; a name tagged differently in both is an error.
    pub fn merge(&self, other: &TransformSpec) -> Result<TransformSpec> {
        let mut out = self.clone();
        for (name, t) in &other.tags {
            match out.tags.get(name) {
                Some(existing) if existing.label() != t.label() => {
                    return Err(Error::Construction(format!(
                        "conflicting transforms for `{name}`: {} vs {}",
                        existing.label(),
                        t.label()
                    )))
                }
                Some(_) => {}
                None => {
                    out.tags.insert(name.clone(), t.clone());
                }
            }
        }
        Ok(out)
    }

    pub fn to_est(&self, p: &ParamSet) -> Result<Vec<f64>> {
        EstimationMap::compile(self, &p.layout())?.to_est(&p.values())
    }

    pub fn from_est(&self, v: &[f64], layout: &Layout) -> Result<ParamSet> {
        let map = EstimationMap::compile(self, layout)?;
        ParamSet::unflatten(layout, &map.from_est(v))
    }
}

#[derive(Clone, Debug)]
pub(crate) enum BlockKind {
    Scalar(Transform),
    Barycentric,
}

/// A set of flattened indices transformed together.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub indices: Vec<usize>,
    pub kind: BlockKind,
}

/// Transform spec resolved against a concrete flattened layout.
#[derive(Clone, Debug)]
pub struct EstimationMap {
    pub(crate) blocks: Vec<Block>,
    names: Vec<String>,
}

impl EstimationMap {
    pub fn compile(spec: &TransformSpec, layout: &Layout) -> Result<Self> {
        let names = layout.flat_names();
        let mut blocks: Vec<Block> = Vec::new();
        // (group id, unit or None) → block position
        let mut groups: Vec<((String, Option<usize>), usize)> = Vec::new();
        for index in 0..layout.len() {
            let (base, unit) = layout.describe(index);
            match spec.get(base) {
                Transform::Barycentric(group) => {
                    let key = (group.clone(), unit);
                    if let Some((_, pos)) = groups.iter().find(|(k, _)| *k == key) {
                        blocks[*pos].indices.push(index);
                    } else {
                        let clash = groups.iter().any(|((g, u), _)| *g == key.0 && u.is_some() != unit.is_some());
                        if clash {
                            return Err(Error::Argument(format!(
                                "barycentric group `{group}` mixes shared and unit-specific parameters"
                            )));
                        }
                        groups.push((key, blocks.len()));
                        blocks.push(Block { indices: vec![index], kind: BlockKind::Barycentric });
                    }
                }
                t => blocks.push(Block { indices: vec![index], kind: BlockKind::Scalar(t.clone()) }),
            }
        }
        Ok(Self { blocks, names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn domain_error(&self, index: usize, value: f64, transform: &'static str) -> Error {
        Error::TransformDomain { name: self.names[index].clone(), value, transform }
    }

    /// Natural scale → estimation scale, checking domains.
    pub fn to_est(&self, natural: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; natural.len()];
        for block in &self.blocks {
            self.block_to_est(block, natural, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_est(&self, est: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; est.len()];
        for block in &self.blocks {
            block_from_est(block, est, &mut out);
        }
        out
    }

    pub(crate) fn block_to_est(&self, block: &Block, natural: &[f64], out: &mut [f64]) -> Result<()> {
        match &block.kind {
            BlockKind::Scalar(t) => {
                let i = block.indices[0];
                out[i] = t
                    .scalar_to_est(natural[i])
                    .ok_or_else(|| self.domain_error(i, natural[i], t.label()))?;
            }
            BlockKind::Barycentric => {
                let mut sum = 0.0;
                for &i in &block.indices {
                    if !(natural[i] > 0.0 && natural[i].is_finite()) {
                        return Err(self.domain_error(i, natural[i], "barycentric"));
                    }
                    sum += natural[i];
                }
                for &i in &block.indices {
                    out[i] = (natural[i] / sum).ln();
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn block_from_est(block: &Block, est: &[f64], out: &mut [f64]) {
    match &block.kind {
        BlockKind::Scalar(t) => {
            let i = block.indices[0];
            out[i] = t.scalar_from_est(est[i]);
        }
        BlockKind::Barycentric => {
            let max = block.indices.iter().map(|&i| est[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in &block.indices {
                out[i] = (est[i] - max).exp();
                sum += out[i];
            }
            for &i in &block.indices {
                out[i] /= sum;
            }
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Barycentric(g) => write!(f, "barycentric({g})"),
            Transform::Custom(c) => write!(f, "custom({})", c.name),
            t => f.write_str(t.label()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{NamedValues, SpecificMatrix};
    use proptest::prelude::*;

    fn single(name: &str, value: f64) -> ParamSet {
        let shared: NamedValues = [(name.to_string(), value)].into_iter().collect();
        ParamSet::new(shared, SpecificMatrix::empty(vec!["u".into()]).unwrap()).unwrap()
    }

    #[test]
    fn scalar_examples() {
        let spec = TransformSpec::new().with("K", Transform::Log).with("p", Transform::Logit).with("tau", Transform::Log);
        assert_eq!(spec.to_est(&single("K", 1.0)).unwrap(), [0.0]);
        assert_eq!(spec.from_est(&[0.0], &single("K", 1.0).layout()).unwrap().get("K"), Some(1.0));
        assert_eq!(spec.to_est(&single("p", 0.5)).unwrap(), [0.0]);
        assert_eq!(spec.from_est(&[0.0], &single("p", 0.5).layout()).unwrap().get("p"), Some(0.5));
        let v = spec.to_est(&single("tau", 0.15)).unwrap()[0];
        assert!((v - (-1.897_119_984_885_881)).abs() < 1e-12);
        let back = spec.from_est(&[v], &single("tau", 0.15).layout()).unwrap().get("tau").unwrap();
        assert!((back - 0.15).abs() <= 1e-12 * 0.15);
    }

    #[test]
    fn domain_violation_names_parameter() {
        let spec = TransformSpec::log(&["K"]);
        match spec.to_est(&single("K", -1.0)) {
            Err(Error::TransformDomain { name, transform, .. }) => {
                assert_eq!(name, "K");
                assert_eq!(transform, "log");
            }
            other => panic!("unexpected {other:?}"),
        }
        let spec = TransformSpec::new().with("p", Transform::Logit);
        assert!(spec.to_est(&single("p", 1.0)).is_err());
    }

    #[test]
    fn barycentric_groups_per_unit() {
        let rows = vec!["a".into(), "b".into(), "c".into()];
        let units = vec!["u1".into(), "u2".into()];
        let specific = SpecificMatrix::new(rows, units, vec![0.2, 0.5, 0.3, 0.3, 0.5, 0.2]).unwrap();
        let p = ParamSet::new(NamedValues::new(), specific).unwrap();
        let spec = ["a", "b", "c"]
            .iter()
            .fold(TransformSpec::new(), |s, n| s.with(n, Transform::Barycentric("g".into())));
        let map = EstimationMap::compile(&spec, &p.layout()).unwrap();
        assert_eq!(map.blocks.len(), 2);
        let est = map.to_est(&p.values()).unwrap();
        let back = map.from_est(&est);
        for (x, y) in back.iter().zip(p.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn custom_transform_roundtrip() {
        let cube = CustomTransform {
            name: "cube".into(),
            to_est: Arc::new(|x: f64| x.cbrt()),
            from_est: Arc::new(|v: f64| v * v * v),
        };
        let spec = TransformSpec::new().with("z", Transform::Custom(cube));
        let p = single("z", 2.5);
        let v = spec.to_est(&p).unwrap();
        let back = spec.from_est(&v, &p.layout()).unwrap().get("z").unwrap();
        assert!((back - 2.5).abs() < 1e-12 * 2.5);
    }

    proptest! {
        #[test]
        fn roundtrip_all_tags(x in 1e-6f64..1e6, p in 1e-6f64..(1.0 - 1e-6), y in -1e6f64..1e6) {
            let spec = TransformSpec::new().with("x", Transform::Log).with("p", Transform::Logit);
            let shared: NamedValues = [("x".to_string(), x), ("p".to_string(), p), ("y".to_string(), y)].into_iter().collect();
            let ps = ParamSet::new(shared, SpecificMatrix::empty(vec!["u".into()]).unwrap()).unwrap();
            let back = spec.from_est(&spec.to_est(&ps).unwrap(), &ps.layout()).unwrap();
            for (a, b) in back.values().iter().zip(ps.values()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(f64::MIN_POSITIVE));
            }
        }

        #[test]
        fn barycentric_output_sums_to_one(v in proptest::collection::vec(-50.0f64..50.0, 2..6)) {
            let names: Vec<String> = (0..v.len()).map(|i| format!("w{i}")).collect();
            let shared: NamedValues = names.iter().cloned().map(|n| (n, 1.0)).collect();
            let ps = ParamSet::new(shared, SpecificMatrix::empty(vec!["u".into()]).unwrap()).unwrap();
            let spec = names.iter().fold(TransformSpec::new(), |s, n| s.with(n, Transform::Barycentric("g".into())));
            let out = spec.from_est(&v, &ps.layout()).unwrap().values();
            let sum: f64 = out.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-14);
        }
    }
}
