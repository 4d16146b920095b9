//! Line-oriented event log and a replay auditor for its spectrum lines.
//!
//! One record per line, whitespace separated:
//!
//! ```text
//! ITER_BEGIN   <iter> <start_offset>
//! SPEC_ALLOC   <abs_time> <owner> <class> <first_slot> <last_slot> <link,link,..>
//! SPEC_RELEASE <abs_time> <owner> <class> <first_slot> <last_slot> <link,link,..>
//! TASK         <id> <stage> <F|B> <microbatch> <ready> <start> <finish>
//! XFER         <request> <producer> <consumer> <src_dc> <dst_dc> <n_fs> <attempts>
//!              <first_blocked> <issue> <complete> <route>
//! BLOCK        <request> <task> <attempts> <outcome>
//! LABEL        <iter> <task> <cb> <blocked>
//! ITER_END     <iter> <makespan> <blocking_probability>
//! ```
//!
//! `route` is `intra`, `fallback` or `path=<n-n-..>@<first>-<last>`. Task and
//! transfer times are relative to the iteration start.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{self, Write};

use super::{Timeline, TransferRoute};
use crate::topology::{LinkId, OwnerId, SlotBlock, SpectrumEvent, SpectrumEventKind, TrafficClass};
use crate::workload::Schedule;

fn join<T: ToString>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items
        .into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

pub fn spectrum_line(ev: &SpectrumEvent) -> String {
    let tag = match ev.kind {
        SpectrumEventKind::Allocate => "SPEC_ALLOC",
        SpectrumEventKind::Release => "SPEC_RELEASE",
    };
    format!(
        "{tag} {} {} {} {} {} {}",
        ev.time,
        ev.owner.0,
        ev.class.as_str(),
        ev.block.start,
        ev.block.end,
        join(ev.links.iter().map(|l| l.0), ",")
    )
}

/// Writes every record of one iteration except labels.
pub fn write_timeline<W: Write>(out: &mut W, timeline: &Timeline, schedule: &Schedule) -> io::Result<()> {
    let mut buf = String::new();
    writeln!(buf, "ITER_BEGIN {} {}", timeline.iteration, timeline.start_offset).unwrap();
    for ev in &timeline.spectrum_events {
        buf.push_str(&spectrum_line(ev));
        buf.push('\n');
    }
    for rec in &timeline.tasks {
        let task = schedule.task(rec.task);
        writeln!(
            buf,
            "TASK {} {} {} {} {} {} {}",
            rec.task.0,
            task.stage,
            task.direction.tag(),
            task.microbatch,
            rec.ready_time,
            rec.start_time,
            rec.finish_time
        )
        .unwrap();
    }
    for t in &timeline.transfers {
        let route = match &t.route {
            TransferRoute::IntraDc => "intra".to_string(),
            TransferRoute::Fallback => "fallback".to_string(),
            TransferRoute::Optical { nodes, block, .. } => {
                format!("path={}@{}-{}", join(nodes, "-"), block.start, block.end)
            }
        };
        writeln!(
            buf,
            "XFER {} {} {} {} {} {} {} {} {} {} {}",
            t.request_id,
            t.producer.0,
            t.consumer.0,
            t.src_dc,
            t.dst_dc,
            t.n_fs,
            t.attempts,
            u8::from(t.first_attempt_blocked),
            t.issue_time,
            t.complete_time,
            route
        )
        .unwrap();
    }
    for b in &timeline.blocking_events {
        writeln!(
            buf,
            "BLOCK {} {} {} {}",
            b.request_id,
            b.task.0,
            b.attempts,
            b.final_outcome.as_str()
        )
        .unwrap();
    }
    writeln!(
        buf,
        "ITER_END {} {} {}",
        timeline.iteration,
        timeline.makespan,
        timeline.blocking_probability()
    )
    .unwrap();
    out.write_all(buf.as_bytes())
}

/// A parsed line relevant to spectrum replay.
#[derive(Debug, Clone, PartialEq)]
pub enum LogRecord {
    IterBegin { iteration: usize },
    Spectrum(SpectrumEvent),
    IterEnd { iteration: usize },
    Other,
}

fn field<'a>(it: &mut impl Iterator<Item = &'a str>, what: &str) -> Result<&'a str, String> {
    it.next().ok_or_else(|| format!("missing {what}"))
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad {what} `{s}`"))
}

pub fn parse_line(line: &str) -> Result<LogRecord, String> {
    let mut it = line.split_whitespace();
    let Some(tag) = it.next() else {
        return Ok(LogRecord::Other);
    };
    match tag {
        "ITER_BEGIN" => Ok(LogRecord::IterBegin {
            iteration: num(field(&mut it, "iteration")?, "iteration")?,
        }),
        "ITER_END" => Ok(LogRecord::IterEnd {
            iteration: num(field(&mut it, "iteration")?, "iteration")?,
        }),
        "SPEC_ALLOC" | "SPEC_RELEASE" => {
            let kind = if tag == "SPEC_ALLOC" {
                SpectrumEventKind::Allocate
            } else {
                SpectrumEventKind::Release
            };
            let time = num(field(&mut it, "time")?, "time")?;
            let owner = OwnerId(num(field(&mut it, "owner")?, "owner")?);
            let class = match field(&mut it, "class")? {
                "training" => TrafficClass::Training,
                "background" => TrafficClass::Background,
                other => return Err(format!("bad class `{other}`")),
            };
            let start = num(field(&mut it, "first slot")?, "first slot")?;
            let end = num(field(&mut it, "last slot")?, "last slot")?;
            if end < start {
                return Err(format!("inverted block {start}..{end}"));
            }
            let links = field(&mut it, "links")?
                .split(',')
                .map(|s| num(s, "link").map(LinkId))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(LogRecord::Spectrum(SpectrumEvent {
                time,
                kind,
                owner,
                class,
                block: SlotBlock::new(start, end),
                links,
            }))
        }
        _ => Ok(LogRecord::Other),
    }
}

/// Replays spectrum lines on an empty network and checks that no slot is
/// ever held twice, releases match allocations, time never runs backwards
/// and no training allocation survives its iteration.
#[derive(Debug, Clone)]
pub struct SpectrumAudit {
    fs_total: usize,
    /// Per link, per slot owner.
    slots: Vec<Vec<Option<OwnerId>>>,
    live: HashMap<OwnerId, (TrafficClass, SlotBlock, Vec<LinkId>)>,
    clock: f64,
    pub allocations: usize,
    pub releases: usize,
}

impl SpectrumAudit {
    pub fn new(link_count: usize, fs_total: usize) -> Self {
        Self {
            fs_total,
            slots: vec![vec![None; fs_total]; link_count],
            live: HashMap::new(),
            clock: f64::NEG_INFINITY,
            allocations: 0,
            releases: 0,
        }
    }

    pub fn feed_line(&mut self, line: &str) -> Result<(), String> {
        match parse_line(line)? {
            LogRecord::Spectrum(ev) => self.apply(&ev),
            LogRecord::IterEnd { iteration } => {
                let mut leaked: Vec<_> = self
                    .live
                    .iter()
                    .filter(|(_, (class, ..))| *class == TrafficClass::Training)
                    .map(|(o, _)| o.0)
                    .collect();
                leaked.sort_unstable();
                if leaked.is_empty() {
                    Ok(())
                } else {
                    Err(format!("iteration {iteration}: training owners {leaked:?} still hold spectrum"))
                }
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&mut self, ev: &SpectrumEvent) -> Result<(), String> {
        if ev.time < self.clock {
            return Err(format!("time moved backwards to {} from {}", ev.time, self.clock));
        }
        self.clock = ev.time;
        if ev.block.end >= self.fs_total {
            return Err(format!("block {} exceeds {} slots", ev.block, self.fs_total));
        }
        for l in &ev.links {
            if l.0 >= self.slots.len() {
                return Err(format!("unknown link {}", l.0));
            }
        }
        match ev.kind {
            SpectrumEventKind::Allocate => {
                if self.live.contains_key(&ev.owner) {
                    return Err(format!("owner {} allocated twice", ev.owner.0));
                }
                for l in &ev.links {
                    for j in ev.block.start..=ev.block.end {
                        if let Some(o) = self.slots[l.0][j] {
                            return Err(format!(
                                "t={}: slot {j} on link {} held by {} and {}",
                                ev.time, l.0, o.0, ev.owner.0
                            ));
                        }
                        self.slots[l.0][j] = Some(ev.owner);
                    }
                }
                self.live
                    .insert(ev.owner, (ev.class, ev.block, ev.links.clone()));
                self.allocations += 1;
            }
            SpectrumEventKind::Release => {
                let Some((class, block, links)) = self.live.get(&ev.owner) else {
                    return Err(format!("release of unknown owner {}", ev.owner.0));
                };
                if *class != ev.class || *block != ev.block || *links != ev.links {
                    return Err(format!("release of owner {} does not match its allocation", ev.owner.0));
                }
                let (_, block, links) = self.live.remove(&ev.owner).unwrap();
                for l in &links {
                    for j in block.start..=block.end {
                        self.slots[l.0][j] = None;
                    }
                }
                self.releases += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: SpectrumEventKind, time: f64, owner: u64, start: usize, end: usize, links: &[usize]) -> String {
        spectrum_line(&SpectrumEvent {
            time,
            kind,
            owner: OwnerId(owner),
            class: TrafficClass::Training,
            block: SlotBlock::new(start, end),
            links: links.iter().map(|&l| LinkId(l)).collect(),
        })
    }

    #[test]
    fn spectrum_lines_round_trip() {
        let line = ev(SpectrumEventKind::Allocate, 0.125, 7, 2, 5, &[3, 9]);
        assert_eq!(line, "SPEC_ALLOC 0.125 7 training 2 5 3,9");
        let LogRecord::Spectrum(parsed) = parse_line(&line).unwrap() else {
            panic!("not a spectrum record");
        };
        assert_eq!(spectrum_line(&parsed), line);
    }

    #[test]
    fn audit_accepts_disjoint_and_rejects_overlap() {
        let mut audit = SpectrumAudit::new(4, 8);
        audit.feed_line(&ev(SpectrumEventKind::Allocate, 0.0, 1, 0, 3, &[0, 1])).unwrap();
        audit.feed_line(&ev(SpectrumEventKind::Allocate, 0.1, 2, 4, 7, &[1])).unwrap();
        let err = audit
            .feed_line(&ev(SpectrumEventKind::Allocate, 0.2, 3, 3, 4, &[2, 1]))
            .unwrap_err();
        assert!(err.contains("held by"), "{err}");
    }

    #[test]
    fn audit_flags_leaks_and_bad_releases() {
        let mut audit = SpectrumAudit::new(2, 8);
        audit.feed_line(&ev(SpectrumEventKind::Allocate, 0.0, 1, 0, 1, &[0])).unwrap();
        assert!(audit.feed_line("ITER_END 0 1 0").is_err());
        assert!(audit
            .feed_line(&ev(SpectrumEventKind::Release, 0.5, 1, 0, 2, &[0]))
            .is_err());
        audit.feed_line(&ev(SpectrumEventKind::Release, 0.5, 1, 0, 1, &[0])).unwrap();
        audit.feed_line("ITER_END 0 1 0").unwrap();
        assert!(audit
            .feed_line(&ev(SpectrumEventKind::Release, 0.6, 1, 0, 1, &[0]))
            .is_err());
    }

    #[test]
    fn audit_rejects_time_reversal() {
        let mut audit = SpectrumAudit::new(2, 8);
        audit.feed_line(&ev(SpectrumEventKind::Allocate, 1.0, 1, 0, 1, &[0])).unwrap();
        assert!(audit
            .feed_line(&ev(SpectrumEventKind::Release, 0.5, 1, 0, 1, &[0]))
            .is_err());
    }
}
