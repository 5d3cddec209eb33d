// SPDX-License-Identifier: Apache-2.0

//! SPICE-style behavioral netlists.
//!
//! Each Gm element becomes a VCCS line plus its load resistor and
//! capacitor. The VCCS value follows the SPICE sign convention (current
//! from `n+` to `n-` through the source), so a positive-polarity stage is
//! written with a negated transconductance.

use std::fmt::Write as _;

use crate::acsim::SweepConfig;
use crate::circuit::{DeviceInstance, DeviceKind, Direction, Polarity};
use crate::error::{CktError, Result};
use crate::stage::{StageElement, StageGraph, StageNode};

/// Renders a stage graph as a netlist. Line order follows element order.
pub fn export_netlist(s: &StageGraph, sweep: &SweepConfig) -> Result<String> {
    s.check()?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "* {} id={} stages={} junctions={}",
        crate::TOOL_VERSION,
        s.id,
        s.stage_count,
        s.junction_count
    );
    for (i, e) in s.elements.iter().enumerate() {
        let k = i + 1;
        let d = &e.device;
        match d.kind {
            DeviceKind::Gm {
                polarity,
                direction,
            } => {
                let (sense, drive) = e.gm_terminals().expect("gm element");
                let tag = match direction {
                    Direction::Feedforward => "Gf",
                    Direction::Feedback => "Gb",
                };
                let value = match polarity {
                    Polarity::Positive => -d.value,
                    Polarity::Negative => d.value,
                };
                let load = d.load.expect("checked gm load");
                let _ = writeln!(out, "{tag}{k} {drive} 0 {sense} 0 {value:e}");
                let _ = writeln!(out, "RL{k} {drive} 0 {:e}", load.r);
                let _ = writeln!(out, "CL{k} {drive} 0 {:e}", load.c);
            }
            DeviceKind::R => {
                let _ = writeln!(out, "R{k} {} {} {:e}", e.from, e.to, d.value);
            }
            DeviceKind::C => {
                let _ = writeln!(out, "C{k} {} {} {:e}", e.from, e.to, d.value);
            }
        }
    }
    let _ = writeln!(out, "Vin in 0 AC 1");
    let _ = writeln!(
        out,
        ".ac dec {} {:e} {:e}",
        sweep.points_per_decade, sweep.f_start_hz, sweep.f_stop_hz
    );
    let _ = writeln!(out, ".end");
    Ok(out)
}

fn parse_err(line: usize, msg: impl Into<String>) -> CktError {
    CktError::Format(format!("netlist line {}: {}", line + 1, msg.into()))
}

fn node(line: usize, s: &str) -> Result<StageNode> {
    StageNode::parse(s).ok_or_else(|| parse_err(line, format!("unknown node `{s}`")))
}

fn number(line: usize, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(line, format!("bad value `{s}`")))
}

/// Element index encoded in a line name such as `Gf3` or `RL3`.
fn element_index(line: usize, name: &str, prefix: &str) -> Result<usize> {
    name[prefix.len()..]
        .parse::<usize>()
        .ok()
        .filter(|&k| k > 0)
        .ok_or_else(|| parse_err(line, format!("bad element name `{name}`")))
}

#[derive(Default)]
struct Pending {
    gm: Option<(DeviceKind, f64, StageNode, StageNode)>,
    load_r: Option<f64>,
    load_c: Option<f64>,
    passive: Option<StageElement>,
}

/// Parses a netlist written by [`export_netlist`] back into a stage graph.
pub fn parse_netlist(text: &str) -> Result<StageGraph> {
    let mut id = 0u64;
    let mut header_counts: Option<(usize, usize)> = None;
    let mut slots: Vec<Pending> = Vec::new();
    let mut saw_end = false;
    let slot = |k: usize, slots: &mut Vec<Pending>| -> usize {
        if slots.len() < k {
            slots.resize_with(k, Pending::default);
        }
        k - 1
    };
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if saw_end {
            return Err(parse_err(ln, "content after .end"));
        }
        if let Some(rest) = line.strip_prefix('*') {
            let mut stages = None;
            let mut junctions = None;
            for tok in rest.split_whitespace() {
                if let Some(v) = tok.strip_prefix("id=") {
                    id = v.parse().map_err(|_| parse_err(ln, "bad id"))?;
                } else if let Some(v) = tok.strip_prefix("stages=") {
                    stages = Some(v.parse().map_err(|_| parse_err(ln, "bad stage count"))?);
                } else if let Some(v) = tok.strip_prefix("junctions=") {
                    junctions = Some(v.parse().map_err(|_| parse_err(ln, "bad junction count"))?);
                }
            }
            if let (Some(s), Some(j)) = (stages, junctions) {
                header_counts = Some((s, j));
            }
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let name = toks[0];
        if name.starts_with('.') {
            match name.to_ascii_lowercase().as_str() {
                ".end" => saw_end = true,
                ".ac" => {}
                _ => return Err(parse_err(ln, format!("unsupported directive `{name}`"))),
            }
            continue;
        }
        if name.starts_with('V') {
            continue;
        }
        if let Some(prefix) = ["Gf", "Gb"].into_iter().find(|p| name.starts_with(p)) {
            if toks.len() != 6 || toks[2] != "0" || toks[4] != "0" {
                return Err(parse_err(ln, "VCCS line needs `name n+ 0 nc+ 0 value`"));
            }
            let k = slot(element_index(ln, name, prefix)?, &mut slots);
            let drive = node(ln, toks[1])?;
            let sense = node(ln, toks[3])?;
            let v = number(ln, toks[5])?;
            if v == 0.0 {
                return Err(parse_err(ln, "zero transconductance"));
            }
            let polarity = if v < 0.0 {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            let direction = if prefix == "Gf" {
                Direction::Feedforward
            } else {
                Direction::Feedback
            };
            let kind = DeviceKind::Gm {
                polarity,
                direction,
            };
            if slots[k].gm.is_some() || slots[k].passive.is_some() {
                return Err(parse_err(ln, format!("duplicate element {}", k + 1)));
            }
            slots[k].gm = Some((kind, v.abs(), sense, drive));
            continue;
        }
        if let Some(prefix) = ["RL", "CL"].into_iter().find(|p| name.starts_with(p)) {
            if toks.len() != 4 || toks[2] != "0" {
                return Err(parse_err(ln, "load line needs `name node 0 value`"));
            }
            let k = slot(element_index(ln, name, prefix)?, &mut slots);
            let v = number(ln, toks[3])?;
            let target = if prefix == "RL" {
                &mut slots[k].load_r
            } else {
                &mut slots[k].load_c
            };
            if target.replace(v).is_some() {
                return Err(parse_err(ln, format!("duplicate load {name}")));
            }
            continue;
        }
        if let Some(prefix) = ["R", "C"].into_iter().find(|p| name.starts_with(p)) {
            if toks.len() != 4 {
                return Err(parse_err(ln, "passive line needs `name n1 n2 value`"));
            }
            let k = slot(element_index(ln, name, prefix)?, &mut slots);
            let v = number(ln, toks[3])?;
            let device = if prefix == "R" {
                DeviceInstance::resistor(v)
            } else {
                DeviceInstance::capacitor(v)
            };
            if slots[k].gm.is_some() || slots[k].passive.is_some() {
                return Err(parse_err(ln, format!("duplicate element {}", k + 1)));
            }
            slots[k].passive = Some(StageElement {
                device,
                from: node(ln, toks[1])?,
                to: node(ln, toks[2])?,
            });
            continue;
        }
        return Err(parse_err(ln, format!("unsupported element `{name}`")));
    }
    if !saw_end {
        return Err(CktError::Format("netlist has no .end".into()));
    }

    let mut elements = Vec::with_capacity(slots.len());
    for (i, p) in slots.into_iter().enumerate() {
        let e = match (p.gm, p.passive) {
            (Some((kind, gm, sense, drive)), None) => {
                let (Some(r), Some(c)) = (p.load_r, p.load_c) else {
                    return Err(CktError::Format(format!(
                        "element {} lacks its load",
                        i + 1
                    )));
                };
                let DeviceKind::Gm {
                    polarity,
                    direction,
                } = kind
                else {
                    unreachable!()
                };
                let (from, to) = match direction {
                    Direction::Feedforward => (sense, drive),
                    Direction::Feedback => (drive, sense),
                };
                StageElement {
                    device: DeviceInstance::gm(polarity, direction, gm, r, c),
                    from,
                    to,
                }
            }
            (None, Some(e)) if p.load_r.is_none() && p.load_c.is_none() => e,
            _ => return Err(CktError::Format(format!("element {} is incomplete", i + 1))),
        };
        elements.push(e);
    }

    let mut stage_count = 1;
    let mut junction_count = 0;
    for e in &elements {
        for n in [e.from, e.to] {
            match n {
                StageNode::Stage(k) => stage_count = stage_count.max(k + 1),
                StageNode::Junction(k) => junction_count = junction_count.max(k + 1),
                _ => {}
            }
        }
    }
    if let Some((s, j)) = header_counts {
        if s < stage_count || j < junction_count {
            return Err(CktError::Format(
                "header node counts disagree with elements".into(),
            ));
        }
        stage_count = s;
        junction_count = j;
    }
    let s = StageGraph {
        id,
        stage_count,
        junction_count,
        elements,
    };
    s.check()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_gm_swaps_controlling_nodes() {
        let s = StageGraph {
            id: 0,
            stage_count: 2,
            junction_count: 0,
            elements: vec![
                StageElement {
                    device: DeviceInstance::gm(
                        Polarity::Positive,
                        Direction::Feedforward,
                        1e-3,
                        1e6,
                        1e-13,
                    ),
                    from: StageNode::In,
                    to: StageNode::Stage(1),
                },
                StageElement {
                    device: DeviceInstance::gm(
                        Polarity::Negative,
                        Direction::Feedforward,
                        1e-3,
                        1e6,
                        1e-13,
                    ),
                    from: StageNode::Stage(1),
                    to: StageNode::Out,
                },
                StageElement {
                    device: DeviceInstance::gm(
                        Polarity::Negative,
                        Direction::Feedback,
                        2e-4,
                        1e6,
                        1e-13,
                    ),
                    from: StageNode::Stage(1),
                    to: StageNode::Out,
                },
            ],
        };
        let text = export_netlist(&s, &SweepConfig::default()).unwrap();
        assert!(text.contains("Gf1 n1 0 in 0 -1e-3\n"));
        assert!(text.contains("Gf2 out 0 n1 0 1e-3\n"));
        assert!(text.contains("Gb3 n1 0 out 0 2e-4\n"));
        assert_eq!(parse_netlist(&text).unwrap(), s);
    }

    #[test]
    fn rejects_incomplete_gm() {
        let text = "Gf1 out 0 in 0 -1e-3\nRL1 out 0 1e6\nVin in 0 AC 1\n.end\n";
        assert!(matches!(parse_netlist(text), Err(CktError::Format(_))));
    }

    #[test]
    fn rejects_missing_end() {
        assert!(parse_netlist("R1 in out 1e6\n").is_err());
    }
}
