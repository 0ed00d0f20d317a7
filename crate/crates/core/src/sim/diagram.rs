//! Path-time diagrams: each agent's arc length over time, with the
//! collision-zone bands and annotations for safety events and mode changes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::planner::Mode;
use crate::safety::SafetyEventKind;
use crate::{AgentId, Error, Result};

use super::log::RunLog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub agent: AgentId,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneBand {
    /// Agent on whose path the band is measured.
    pub agent: AgentId,
    pub partner: AgentId,
    pub s_in: f64,
    pub s_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub agent: AgentId,
    pub t: f64,
    pub s: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTimeDiagram {
    pub series: Vec<Series>,
    pub bands: Vec<ZoneBand>,
    pub annotations: Vec<Annotation>,
}

/// Keep every `stride`-th sample of the dense log plus the last one.
const STRIDE: usize = 10;

impl PathTimeDiagram {
    pub fn from_log(log: &RunLog) -> Self {
        let series = log
            .agents
            .iter()
            .map(|a| {
                let mut points: Vec<(f64, f64)> =
                    a.rows.iter().step_by(STRIDE).map(|r| (r.t, r.s)).collect();
                if let Some(last) = a.rows.last() {
                    if (a.rows.len() - 1) % STRIDE != 0 {
                        points.push((last.t, last.s));
                    }
                }
                Series {
                    agent: a.id.clone(),
                    points,
                }
            })
            .collect();
        let mut bands = Vec::new();
        for z in &log.zones {
            bands.push(ZoneBand {
                agent: z.agent_a.clone(),
                partner: z.agent_b.clone(),
                s_in: z.interval_a.s_in,
                s_out: z.interval_a.s_out,
            });
            bands.push(ZoneBand {
                agent: z.agent_b.clone(),
                partner: z.agent_a.clone(),
                s_in: z.interval_b.s_in,
                s_out: z.interval_b.s_out,
            });
        }
        let s_at = |agent: &str, t: f64| {
            log.trace(agent)
                .and_then(|tr| tr.rows.iter().find(|r| r.t >= t - 1e-9))
                .map_or(0.0, |r| r.s)
        };
        let mut annotations = Vec::new();
        for e in &log.safety {
            let label = match e.kind {
                SafetyEventKind::Trigger => "override",
                SafetyEventKind::Release => "release",
            };
            annotations.push(Annotation {
                agent: e.agent.clone(),
                t: e.t,
                s: s_at(&e.agent, e.t),
                label: label.into(),
            });
        }
        let mut last_mode: Vec<(&str, Mode)> = Vec::new();
        for rec in &log.planner {
            let prev = last_mode.iter_mut().find(|(a, _)| *a == rec.agent);
            let changed = match prev {
                Some((_, m)) if *m == rec.mode => false,
                Some((_, m)) => {
                    *m = rec.mode;
                    true
                }
                None => {
                    last_mode.push((&rec.agent, rec.mode));
                    rec.mode != Mode::Cooperative
                }
            };
            if changed {
                let label = match rec.mode {
                    Mode::Cooperative => "cooperative",
                    Mode::Defensive => "defensive",
                };
                annotations.push(Annotation {
                    agent: rec.agent.clone(),
                    t: rec.t,
                    s: s_at(&rec.agent, rec.t),
                    label: label.into(),
                });
            }
        }
        PathTimeDiagram {
            series,
            bands,
            annotations,
        }
    }

    /// Rows `kind,agent,t,s,s_out,label` with fixed six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,agent,t,s,s_out,label\n");
        for s in &self.series {
            for (t, v) in &s.points {
                let _ = writeln!(out, "series,{},{t:.6},{v:.6},,", s.agent);
            }
        }
        for b in &self.bands {
            let _ = writeln!(
                out,
                "zone,{},,{:.6},{:.6},{}",
                b.agent, b.s_in, b.s_out, b.partner
            );
        }
        for a in &self.annotations {
            let _ = writeln!(out, "event,{},{:.6},{:.6},,{}", a.agent, a.t, a.s, a.label);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("kind,agent,t,s,s_out,label") {
            return Err(Error::Parse("diagram CSV: unexpected header".into()));
        }
        let num = |x: &str, line: usize| {
            x.parse::<f64>()
                .map_err(|e| Error::Parse(format!("diagram CSV line {line}: {e}")))
        };
        let mut d = PathTimeDiagram {
            series: vec![],
            bands: vec![],
            annotations: vec![],
        };
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Parse(format!(
                    "diagram CSV line {n}: expected 6 fields"
                )));
            }
            match f[0] {
                "series" => {
                    let point = (num(f[2], n)?, num(f[3], n)?);
                    match d.series.iter_mut().find(|s| s.agent == f[1]) {
                        Some(s) => s.points.push(point),
                        None => d.series.push(Series {
                            agent: f[1].into(),
                            points: vec![point],
                        }),
                    }
                }
                "zone" => d.bands.push(ZoneBand {
                    agent: f[1].into(),
                    partner: f[5].into(),
                    s_in: num(f[3], n)?,
                    s_out: num(f[4], n)?,
                }),
                "event" => d.annotations.push(Annotation {
                    agent: f[1].into(),
                    t: num(f[2], n)?,
                    s: num(f[3], n)?,
                    label: f[5].into(),
                }),
                other => {
                    return Err(Error::Parse(format!(
                        "diagram CSV line {n}: unknown kind '{other}'"
                    )))
                }
            }
        }
        Ok(d)
    }

    /// Standalone SVG: one polyline per agent over shaded zone bands.
    pub fn to_svg(&self) -> String {
        const W: f64 = 720.0;
        const H: f64 = 480.0;
        const M: f64 = 50.0;
        const COLORS: [&str; 6] = [
            "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
        ];
        let all = self.series.iter().flat_map(|s| s.points.iter());
        let t_max = all.clone().map(|p| p.0).fold(1.0, f64::max);
        let s_max = all
            .map(|p| p.1)
            .chain(self.bands.iter().map(|b| b.s_out))
            .fold(1.0, f64::max);
        let x = |t: f64| M + t / t_max * (W - 2.0 * M);
        let y = |s: f64| H - M - s / s_max * (H - 2.0 * M);
        let color = |agent: &str| {
            let i = self
                .series
                .iter()
                .position(|s| s.agent == agent)
                .unwrap_or(0);
            COLORS[i % COLORS.len()]
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
        );
        let _ = writeln!(out, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
        for b in &self.bands {
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\" fill-opacity=\"0.15\"/>",
                M,
                y(b.s_out),
                W - 2.0 * M,
                y(b.s_in) - y(b.s_out),
                color(&b.agent)
            );
        }
        let _ = writeln!(
            out,
            "<path d=\"M{M} {m0} L{M} {top} M{M} {m0} L{right} {m0}\" stroke=\"black\" fill=\"none\"/>",
            m0 = H - M,
            top = M,
            right = W - M
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">t [s] (max {t_max:.1})</text>",
            W / 2.0,
            H - 15.0
        );
        let _ = writeln!(
            out,
            "<text x=\"5\" y=\"{}\" font-size=\"12\">s [m] (max {s_max:.1})</text>",
            M - 15.0
        );
        for s in &self.series {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|p| format!("{:.2},{:.2}", x(p.0), y(p.1)))
                .collect();
            let _ = writeln!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>",
                pts.join(" "),
                color(&s.agent)
            );
        }
        for a in &self.annotations {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{}\"><title>{} {}</title></circle>",
                x(a.t),
                y(a.s),
                color(&a.agent),
                a.agent,
                a.label
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{}\">{}</text>",
                W - M - 80.0,
                M + 15.0 * i as f64,
                color(&s.agent),
                s.agent
            );
        }
        out.push_str("</svg>\n");
        out
    }
}
