// SPDX-License-Identifier: Apache-2.0

//! The ordered subgraph basis for op-amp circuits.
//!
//! Every entry is a small device pattern between one head junction and one
//! tail junction. Parallel entries put both devices across head and tail;
//! series entries chain them through a private internal junction.

use std::fmt::Write as _;

use crate::circuit::DeviceKind;
use crate::error::{CktError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Combination {
    Single,
    Parallel,
    Series,
}

impl Combination {
    fn rank(self) -> u8 {
        match self {
            Combination::Parallel => 2,
            Combination::Series => 1,
            Combination::Single => 0,
        }
    }
}

/// Where a device terminal lands relative to its entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Terminal {
    Head,
    Tail,
    Internal(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryDevice {
    pub kind: DeviceKind,
    pub reads: Terminal,
    pub drives: Terminal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasisEntry {
    pub id: usize,
    pub combination: Combination,
    pub devices: Vec<EntryDevice>,
    /// Position in the total order; larger is preferred.
    pub order: usize,
}

impl BasisEntry {
    /// Directed device edges inside the entry (driver -> reader of an
    /// internal junction).
    pub fn internal_edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for (i, a) in self.devices.iter().enumerate() {
            for (k, b) in self.devices.iter().enumerate() {
                if let (Terminal::Internal(x), Terminal::Internal(y)) = (a.drives, b.reads) {
                    if x == y {
                        e.push((i, k));
                    }
                }
            }
        }
        e
    }

    /// Undirected internal topology, as adjacency lists.
    pub fn undirected_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.devices.len()];
        for (a, b) in self.internal_edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn head_devices(&self) -> Vec<usize> {
        (0..self.devices.len())
            .filter(|&i| self.devices[i].reads == Terminal::Head)
            .collect()
    }

    pub fn tail_devices(&self) -> Vec<usize> {
        (0..self.devices.len())
            .filter(|&i| self.devices[i].drives == Terminal::Tail)
            .collect()
    }

    /// Number of continuous parameters (feature slots) the entry carries.
    pub fn slot_count(&self) -> usize {
        self.devices.iter().map(|d| d.kind.slots().len()).sum()
    }

    /// Incoming external edges meet exactly one junction (the head) and
    /// outgoing ones leave exactly one (the tail); internal junctions are
    /// private to the entry.
    pub fn satisfies_single_head_tail(&self) -> bool {
        let heads = self.head_devices();
        let tails = self.tail_devices();
        let no_head_drive = self.devices.iter().all(|d| d.drives != Terminal::Head);
        let no_tail_read = self.devices.iter().all(|d| d.reads != Terminal::Tail);
        !heads.is_empty() && !tails.is_empty() && no_head_drive && no_tail_read
    }

    pub fn name(&self) -> String {
        let names: Vec<&str> = self.devices.iter().map(|d| d.kind.short_name()).collect();
        match self.combination {
            Combination::Single => names[0].to_string(),
            Combination::Parallel => names.join(" || "),
            Combination::Series => names.join(" -- "),
        }
    }
}

/// Relative priority of the two passive kinds. The swapped variant exists
/// to test that decompositions do not hinge on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PassiveOrder {
    #[default]
    RAboveC,
    CAboveR,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgraphBasis {
    pub entries: Vec<BasisEntry>,
    pub passive_order: PassiveOrder,
}

const GM_VARIANTS: [DeviceKind; 4] = [
    DeviceKind::GM_POS_FWD,
    DeviceKind::GM_NEG_FWD,
    DeviceKind::GM_POS_FBK,
    DeviceKind::GM_NEG_FBK,
];

fn single(kind: DeviceKind) -> Vec<EntryDevice> {
    vec![EntryDevice {
        kind,
        reads: Terminal::Head,
        drives: Terminal::Tail,
    }]
}

fn parallel(a: DeviceKind, b: DeviceKind) -> Vec<EntryDevice> {
    [a, b]
        .into_iter()
        .map(|kind| EntryDevice {
            kind,
            reads: Terminal::Head,
            drives: Terminal::Tail,
        })
        .collect()
}

fn series(a: DeviceKind, b: DeviceKind) -> Vec<EntryDevice> {
    vec![
        EntryDevice {
            kind: a,
            reads: Terminal::Head,
            drives: Terminal::Internal(0),
        },
        EntryDevice {
            kind: b,
            reads: Terminal::Internal(0),
            drives: Terminal::Tail,
        },
    ]
}

/// The default basis: 24 entries, R above C.
pub fn build_default_basis() -> SubgraphBasis {
    build_basis(PassiveOrder::RAboveC)
}

pub fn build_basis(passive_order: PassiveOrder) -> SubgraphBasis {
    let mut raw: Vec<(Combination, Vec<EntryDevice>)> = vec![
        (Combination::Single, single(DeviceKind::C)),
        (Combination::Single, single(DeviceKind::R)),
        (
            Combination::Parallel,
            parallel(DeviceKind::R, DeviceKind::C),
        ),
        (Combination::Series, series(DeviceKind::R, DeviceKind::C)),
    ];
    for gm in GM_VARIANTS {
        raw.push((Combination::Single, single(gm)));
    }
    for gm in GM_VARIANTS {
        raw.push((Combination::Parallel, parallel(gm, DeviceKind::R)));
        raw.push((Combination::Parallel, parallel(gm, DeviceKind::C)));
        raw.push((Combination::Series, series(gm, DeviceKind::R)));
        raw.push((Combination::Series, series(gm, DeviceKind::C)));
    }
    let mut entries: Vec<BasisEntry> = raw
        .into_iter()
        .enumerate()
        .map(|(id, (combination, devices))| BasisEntry {
            id,
            combination,
            devices,
            order: 0,
        })
        .collect();

    let rank = |k: DeviceKind| -> usize {
        match (k, passive_order) {
            (DeviceKind::R, PassiveOrder::CAboveR) => 0,
            (DeviceKind::C, PassiveOrder::CAboveR) => 1,
            _ => k.index(),
        }
    };
    let key = |e: &BasisEntry| {
        let mut tuple: Vec<usize> = e.devices.iter().map(|d| rank(d.kind)).collect();
        tuple.sort_unstable_by(|a, b| b.cmp(a));
        (e.devices.len(), e.combination.rank(), tuple)
    };
    let mut ids: Vec<usize> = (0..entries.len()).collect();
    ids.sort_by_key(|&i| key(&entries[i]));
    for (o, i) in ids.into_iter().enumerate() {
        entries[i].order = o;
    }
    SubgraphBasis {
        entries,
        passive_order,
    }
}

impl SubgraphBasis {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: usize) -> Result<&BasisEntry> {
        self.entries.get(id).ok_or(CktError::UnknownEntry(id))
    }

    pub fn order(&self, id: usize) -> usize {
        self.entries[id].order
    }

    /// Entry ids from highest to lowest order.
    pub fn by_priority(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.len()).collect();
        ids.sort_by_key(|&i| std::cmp::Reverse(self.entries[i].order));
        ids
    }

    pub fn single_entry(&self, kind: DeviceKind) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.combination == Combination::Single && e.devices[0].kind == kind)
            .map(|e| e.id)
    }

    /// Parallel entry holding both kinds (in either order). Returns the
    /// entry id and whether `a` is the entry's first device.
    pub fn parallel_entry(&self, a: DeviceKind, b: DeviceKind) -> Option<(usize, bool)> {
        self.entries
            .iter()
            .filter(|e| e.combination == Combination::Parallel)
            .find_map(|e| {
                let (x, y) = (e.devices[0].kind, e.devices[1].kind);
                if (x, y) == (a, b) {
                    Some((e.id, true))
                } else if (x, y) == (b, a) {
                    Some((e.id, false))
                } else {
                    None
                }
            })
    }

    /// Series entry with `first` driving the internal junction read by `second`.
    pub fn series_entry(&self, first: DeviceKind, second: DeviceKind) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| {
                e.combination == Combination::Series
                    && e.devices[0].kind == first
                    && e.devices[1].kind == second
            })
            .map(|e| e.id)
    }

    /// Markdown table of every entry, highest priority first.
    pub fn catalog_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| entry_id | order | combination | devices | slots |\n");
        s.push_str("|---:|---:|---|---|---:|\n");
        for id in self.by_priority() {
            let e = &self.entries[id];
            let _ = writeln!(
                s,
                "| {} | {} | {:?} | {} | {} |",
                e.id,
                e.order,
                e.combination,
                e.name(),
                e.slot_count()
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_four_entries_with_strict_order() {
        let b = build_default_basis();
        assert_eq!(b.len(), 24);
        let mut orders: Vec<usize> = b.entries.iter().map(|e| e.order).collect();
        orders.sort_unstable();
        assert_eq!(orders, (0..24).collect::<Vec<_>>());
        for (i, e) in b.entries.iter().enumerate() {
            assert_eq!(e.id, i);
            assert!(e.satisfies_single_head_tail(), "{}", e.name());
        }
    }

    #[test]
    fn single_gm_above_r_above_c() {
        let b = build_default_basis();
        let o = |k| b.order(b.single_entry(k).unwrap());
        for gm in GM_VARIANTS {
            assert!(o(gm) > o(DeviceKind::R));
        }
        assert!(o(DeviceKind::R) > o(DeviceKind::C));
        assert!(o(DeviceKind::GM_POS_FWD) > o(DeviceKind::GM_NEG_FWD));
        assert!(o(DeviceKind::GM_NEG_FWD) > o(DeviceKind::GM_POS_FBK));
        assert!(o(DeviceKind::GM_POS_FBK) > o(DeviceKind::GM_NEG_FBK));
    }

    #[test]
    fn parallel_beats_series_for_same_variant() {
        let b = build_default_basis();
        for gm in GM_VARIANTS {
            for p in [DeviceKind::R, DeviceKind::C] {
                let par = b.parallel_entry(gm, p).unwrap().0;
                let ser = b.series_entry(gm, p).unwrap();
                assert!(b.order(par) > b.order(ser));
            }
        }
    }

    #[test]
    fn every_size_one_pattern_is_present() {
        let b = build_default_basis();
        for k in DeviceKind::ALL {
            assert!(b.single_entry(k).is_some());
        }
    }

    #[test]
    fn swapped_passives_flip_only_passive_ties() {
        let a = build_default_basis();
        let s = build_basis(PassiveOrder::CAboveR);
        let r = a.single_entry(DeviceKind::R).unwrap();
        let c = a.single_entry(DeviceKind::C).unwrap();
        assert!(a.order(r) > a.order(c));
        assert!(s.order(c) > s.order(r));
        let gm_r = a
            .parallel_entry(DeviceKind::GM_POS_FWD, DeviceKind::R)
            .unwrap()
            .0;
        let gm_c = a
            .parallel_entry(DeviceKind::GM_POS_FWD, DeviceKind::C)
            .unwrap()
            .0;
        assert!(a.order(gm_r) > a.order(gm_c));
        assert!(s.order(gm_c) > s.order(gm_r));
    }

    #[test]
    fn series_entries_have_one_internal_edge() {
        let b = build_default_basis();
        for e in &b.entries {
            let n = e.internal_edges().len();
            match e.combination {
                Combination::Series => assert_eq!(n, 1),
                _ => assert_eq!(n, 0),
            }
        }
    }

    #[test]
    fn unknown_entry_is_an_error() {
        assert!(matches!(
            build_default_basis().entry(24),
            Err(CktError::UnknownEntry(24))
        ));
    }
}
