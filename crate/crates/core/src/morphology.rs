//! Limb/joint trees and their line-based config documents.
//!
//! ```text
//! morphology <name> v1
//! # comment
//! limb <index> <type> <parent|-> <ox> <oy> <oz> <side> <x_lo> <x_hi> <y_lo> <y_hi> <z_lo> <z_hi>
//! ```
//!
//! Angles are written in degrees and held in radians.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LimbType {
    Torso,
    Thigh,
    Shin,
    Foot,
    Other,
}

impl LimbType {
    /// Four-slot type code; `Other` has no slot and maps to all zeros.
    pub fn code(self) -> [f64; 4] {
        match self {
            LimbType::Torso => [1.0, 0.0, 0.0, 0.0],
            LimbType::Thigh => [0.0, 1.0, 0.0, 0.0],
            LimbType::Shin => [0.0, 0.0, 1.0, 0.0],
            LimbType::Foot => [0.0, 0.0, 0.0, 1.0],
            LimbType::Other => [0.0; 4],
        }
    }
}

pub fn limb_type_code(t: LimbType) -> [f64; 4] {
    t.code()
}

impl FromStr for LimbType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "torso" => LimbType::Torso,
            "thigh" => LimbType::Thigh,
            "shin" => LimbType::Shin,
            "foot" => LimbType::Foot,
            "other" => LimbType::Other,
            _ => return Err(Error::Schema(format!("unknown limb type `{s}`"))),
        })
    }
}

impl fmt::Display for LimbType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LimbType::Torso => "torso",
            LimbType::Thigh => "thigh",
            LimbType::Shin => "shin",
            LimbType::Foot => "foot",
            LimbType::Other => "other",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimbDescriptor {
    /// 1-based; the torso is limb 1.
    pub index: usize,
    pub limb_type: LimbType,
    pub parent: Option<usize>,
    /// Metres, torso frame.
    pub nominal_offset: [f64; 3],
    /// -1 left, 0 centre, +1 right.
    pub side: i8,
    /// `[low, high]` radians for the local x, y and z axes.
    pub joint_ranges: [[f64; 2]; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MorphGraph {
    name: String,
    limbs: Vec<LimbDescriptor>,
    edges: Vec<(usize, usize)>,
}

impl MorphGraph {
    /// Validates the tree and range invariants. `limbs` may be in any order.
    pub fn new(name: impl Into<String>, mut limbs: Vec<LimbDescriptor>) -> Result<Self> {
        limbs.sort_by_key(|l| l.index);
        let mut seen = BTreeSet::new();
        for l in &limbs {
            if !seen.insert(l.index) {
                return Err(Error::Schema(format!("duplicate limb index {}", l.index)));
            }
        }
        if limbs.is_empty() {
            return Err(Error::Schema("no limbs".into()));
        }
        for (pos, l) in limbs.iter().enumerate() {
            if l.index != pos + 1 {
                return Err(Error::Schema(format!("limb indices must be contiguous from 1; found {}", l.index)));
            }
        }
        let torsos: Vec<_> = limbs.iter().filter(|l| l.limb_type == LimbType::Torso).collect();
        match torsos.as_slice() {
            [] => return Err(Error::Schema("missing torso".into())),
            [t] if t.index == 1 && t.parent.is_none() => {}
            [_] => return Err(Error::Schema("torso must be limb 1 with no parent".into())),
            _ => return Err(Error::Schema("more than one torso".into())),
        }
        for l in &limbs {
            if !matches!(l.side, -1..=1) {
                return Err(Error::Schema(format!("limb {}: side must be -1, 0 or 1", l.index)));
            }
            for (axis, [lo, hi]) in l.joint_ranges.iter().enumerate() {
                let ok = lo < hi && *lo >= -PI - 1e-12 && *hi <= PI + 1e-12;
                if !ok || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Range(format!(
                        "limb {} axis {}: [{lo}, {hi}] is not an increasing interval within [-pi, pi]",
                        l.index,
                        ["x", "y", "z"][axis]
                    )));
                }
            }
        }
        let n = limbs.len();
        let mut edges = Vec::with_capacity(n - 1);
        for l in limbs.iter().skip(1) {
            let p = l.parent.ok_or_else(|| Error::Topology(format!("limb {} has no parent", l.index)))?;
            if p == l.index || p == 0 || p > n {
                return Err(Error::Topology(format!("limb {} has invalid parent {p}", l.index)));
            }
            edges.push((p.min(l.index), p.max(l.index)));
        }
        // Every limb must reach the torso by following parents.
        for l in &limbs {
            let mut cur = l.index;
            let mut steps = 0;
            while cur != 1 {
                cur = limbs[cur - 1].parent.expect("checked above");
                steps += 1;
                if steps > n {
                    return Err(Error::Topology(format!("cycle through limb {}", l.index)));
                }
            }
        }
        Ok(Self { name: name.into(), limbs, edges })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn limbs(&self) -> &[LimbDescriptor] {
        &self.limbs
    }

    pub fn limb(&self, index: usize) -> &LimbDescriptor {
        &self.limbs[index - 1]
    }

    pub fn len(&self) -> usize {
        self.limbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.limbs.is_empty()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> Result<BTreeSet<usize>> {
        if i == 0 || i > self.limbs.len() {
            return Err(Error::Contract(format!("limb index {i} outside 1..={}", self.limbs.len())));
        }
        Ok(self
            .edges
            .iter()
            .filter_map(|&(a, b)| if a == i { Some(b) } else if b == i { Some(a) } else { None })
            .collect())
    }

    pub fn serialize(&self) -> String {
        let mut out = format!("morphology {} v1\n", self.name);
        for l in &self.limbs {
            let parent = l.parent.map_or("-".to_string(), |p| p.to_string());
            let [ox, oy, oz] = l.nominal_offset;
            write!(out, "limb {} {} {parent} {ox} {oy} {oz} {}", l.index, l.limb_type, l.side).unwrap();
            for [lo, hi] in l.joint_ranges {
                write!(out, " {} {}", lo.to_degrees(), hi.to_degrees()).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn num<T: FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Schema(format!("line {line}: bad {what} `{tok}`")))
}

pub fn parse_morphology(text: &str) -> Result<MorphGraph> {
    let mut name = None;
    let mut limbs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = lineno + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "morphology" => {
                if name.is_some() {
                    return Err(Error::Schema(format!("line {lineno}: second header")));
                }
                if toks.len() != 3 || toks[2] != "v1" {
                    return Err(Error::Schema(format!("line {lineno}: expected `morphology <name> v1`")));
                }
                name = Some(toks[1].to_string());
            }
            "limb" => {
                if name.is_none() {
                    return Err(Error::Schema(format!("line {lineno}: limb before header")));
                }
                if toks.len() != 14 {
                    return Err(Error::Schema(format!("line {lineno}: limb record needs 14 fields, got {}", toks.len())));
                }
                let parent = match toks[3] {
                    "-" => None,
                    p => Some(num(p, lineno, "parent")?),
                };
                let f = |k: usize, what: &str| num::<f64>(toks[k], lineno, what);
                let range = |k: usize| -> Result<[f64; 2]> {
                    Ok([f(k, "angle")?.to_radians(), f(k + 1, "angle")?.to_radians()])
                };
                limbs.push(LimbDescriptor {
                    index: num(toks[1], lineno, "index")?,
                    limb_type: toks[2].parse()?,
                    parent,
                    nominal_offset: [f(4, "offset")?, f(5, "offset")?, f(6, "offset")?],
                    side: num(toks[7], lineno, "side")?,
                    joint_ranges: [range(8)?, range(10)?, range(12)?],
                });
            }
            other => return Err(Error::Schema(format!("line {lineno}: unknown record `{other}`"))),
        }
    }
    let name = name.ok_or_else(|| Error::Schema("missing `morphology <name> v1` header".into()))?;
    MorphGraph::new(name, limbs)
}

/// Built-in morphology documents.
pub mod registry {
    use super::*;

    const DOCS: &[(&str, &str)] = &[
        ("3d_hopper_3_shin", include_str!("../morphologies/3d_hopper_3_shin.morph")),
        ("3d_hopper_4_lower_shin", include_str!("../morphologies/3d_hopper_4_lower_shin.morph")),
        ("3d_hopper_5_full", include_str!("../morphologies/3d_hopper_5_full.morph")),
        ("3d_walker_7_full", include_str!("../morphologies/3d_walker_7_full.morph")),
        ("3d_humanoid_9_full", include_str!("../morphologies/3d_humanoid_9_full.morph")),
        ("3d_cheetah_14_full", include_str!("../morphologies/3d_cheetah_14_full.morph")),
    ];

    pub fn names() -> impl Iterator<Item = &'static str> {
        DOCS.iter().map(|(n, _)| *n)
    }

    pub fn document(name: &str) -> Option<&'static str> {
        DOCS.iter().find(|(n, _)| *n == name).map(|(_, d)| *d)
    }

    pub fn load(name: &str) -> Result<MorphGraph> {
        let doc = document(name).ok_or_else(|| Error::Schema(format!("no built-in morphology `{name}`")))?;
        parse_morphology(doc)
    }

    /// Registry name, or else a path to a config document.
    pub fn resolve(name_or_path: &str) -> Result<MorphGraph> {
        match document(name_or_path) {
            Some(doc) => parse_morphology(doc),
            None => parse_morphology(&std::fs::read_to_string(name_or_path)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CHAIN: &str = "morphology chain v1\n\
        limb 1 torso - 0 0 0 0 -180 180 -180 180 -180 180\n\
        limb 2 thigh 1 0 0 -0.3 0 -10 10 -150 0 -10 10\n\
        limb 3 shin 2 0 0 -0.6 0 -10 10 -150 0 -10 10\n";

    #[test]
    fn minimal_chain() {
        let g = parse_morphology(CHAIN).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.edges().len(), 2);
        assert_eq!(g.neighbors(2).unwrap().into_iter().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(g.neighbors(1).unwrap().into_iter().collect::<Vec<_>>(), vec![2]);
        assert!(matches!(g.neighbors(4), Err(Error::Contract(_))));
        assert!(matches!(g.neighbors(0), Err(Error::Contract(_))));
    }

    #[test]
    fn star_neighbors() {
        let doc = "morphology star v1\n\
            limb 1 torso - 0 0 0 0 -180 180 -180 180 -180 180\n\
            limb 2 other 1 0 0 0 0 -1 1 -1 1 -1 1\n\
            limb 3 other 1 0 0 0 0 -1 1 -1 1 -1 1\n\
            limb 4 other 1 0 0 0 0 -1 1 -1 1 -1 1\n";
        let g = parse_morphology(doc).unwrap();
        assert_eq!(g.neighbors(1).unwrap().into_iter().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn walker_shin_range_in_radians() {
        let g = registry::load("3d_walker_7_full").unwrap();
        let shin = g.limbs().iter().find(|l| l.limb_type == LimbType::Shin).unwrap();
        let [lo, hi] = shin.joint_ranges[1];
        assert!((lo - -2.7925).abs() < 5e-5 && (hi - -0.0349).abs() < 5e-5, "{lo} {hi}");
    }

    #[test]
    fn rejections() {
        let dup = CHAIN.replace("limb 3 shin 2", "limb 2 shin 2");
        assert!(matches!(parse_morphology(&dup), Err(Error::Schema(_))));
        let no_torso = CHAIN.replace("torso", "other");
        assert!(matches!(parse_morphology(&no_torso), Err(Error::Schema(_))));
        let inverted = CHAIN.replace("-150 0 -10 10\nlimb 3", "0 -150 -10 10\nlimb 3");
        assert!(matches!(parse_morphology(&inverted), Err(Error::Range(_))));
        let wide = CHAIN.replace("limb 3 shin 2 0 0 -0.6 0 -10 10", "limb 3 shin 2 0 0 -0.6 0 -10 190");
        assert!(matches!(parse_morphology(&wide), Err(Error::Range(_))));
        let cycle = "morphology cyc v1\n\
            limb 1 torso - 0 0 0 0 -180 180 -180 180 -180 180\n\
            limb 2 thigh 3 0 0 0 0 -1 1 -1 1 -1 1\n\
            limb 3 shin 2 0 0 0 0 -1 1 -1 1 -1 1\n";
        assert!(matches!(parse_morphology(cycle), Err(Error::Topology(_))));
        let orphan = CHAIN.replace("limb 3 shin 2", "limb 3 shin -");
        assert!(matches!(parse_morphology(&orphan), Err(Error::Topology(_))));
        let gap = CHAIN.replace("limb 3 shin", "limb 4 shin");
        assert!(matches!(parse_morphology(&gap), Err(Error::Schema(_))));
        assert!(matches!(parse_morphology("limb 1 torso"), Err(Error::Schema(_))));
    }

    #[test]
    fn type_codes() {
        assert_eq!(limb_type_code(LimbType::Torso), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(limb_type_code(LimbType::Other), [0.0; 4]);
        assert_eq!(limb_type_code(LimbType::Foot), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn registry_variants_are_valid() {
        let sizes: Vec<usize> = registry::names().map(|n| registry::load(n).unwrap().len()).collect();
        assert_eq!(sizes, vec![3, 4, 5, 7, 9, 14]);
        for n in registry::names() {
            assert_eq!(registry::load(n).unwrap().name(), n);
        }
    }

    fn assert_same(a: &MorphGraph, b: &MorphGraph) {
        assert_eq!(a.name(), b.name());
        assert_eq!(a.edges(), b.edges());
        for (x, y) in a.limbs().iter().zip(b.limbs()) {
            assert_eq!((x.index, x.limb_type, x.parent, x.side, x.nominal_offset), (y.index, y.limb_type, y.parent, y.side, y.nominal_offset));
            for (rx, ry) in x.joint_ranges.iter().zip(&y.joint_ranges) {
                assert!((rx[0] - ry[0]).abs() < 1e-12 && (rx[1] - ry[1]).abs() < 1e-12);
            }
        }
    }

    fn arb_graph() -> impl Strategy<Value = MorphGraph> {
        (1usize..15).prop_flat_map(|n| {
            let parents = proptest::collection::vec(any::<prop::sample::Index>(), n);
            let types = proptest::collection::vec(0usize..4, n);
            let nums = proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0, -1i8..=1), n);
            let ranges = proptest::collection::vec(proptest::array::uniform3((-179.0f64..0.0, 0.5f64..179.0)), n);
            (parents, types, nums, ranges).prop_map(move |(parents, types, nums, ranges)| {
                let kinds = [LimbType::Thigh, LimbType::Shin, LimbType::Foot, LimbType::Other];
                let limbs = (1..=n)
                    .map(|i| LimbDescriptor {
                        index: i,
                        limb_type: if i == 1 { LimbType::Torso } else { kinds[types[i - 1]] },
                        parent: (i > 1).then(|| parents[i - 1].index(i - 1) + 1),
                        nominal_offset: [nums[i - 1].0, nums[i - 1].1, nums[i - 1].2],
                        side: nums[i - 1].3,
                        joint_ranges: ranges[i - 1].map(|(lo, hi)| [lo.to_radians(), hi.to_radians()]),
                    })
                    .collect();
                MorphGraph::new("random", limbs).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn parse_serialize_roundtrip(g in arb_graph()) {
            let back = parse_morphology(&g.serialize()).unwrap();
            assert_same(&g, &back);
            prop_assert_eq!(back.edges().len(), back.len() - 1);
        }
    }
}
