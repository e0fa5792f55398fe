//! Text log files.
//!
//! Three comma-separated files, each with a fixed header row:
//!
//! ```text
//! user_id,story_id,day,session_id,section,slate_rank,outcome_kind
//! user_id,grade,channel,registration_day
//! story_id,collection_tag,minutes_lo,minutes_hi
//! ```
//!
//! `slate_rank` is empty for sections without a ranked slate. Users and
//! stories that appear in the log but not in a sidecar are registered with
//! placeholder metadata and listed in the [`IngestReport`].

use super::*;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const LOG_HEADER: [&str; 7] = [
    "user_id",
    "story_id",
    "day",
    "session_id",
    "section",
    "slate_rank",
    "outcome_kind",
];
pub const USER_HEADER: [&str; 4] = ["user_id", "grade", "channel", "registration_day"];
pub const STORY_HEADER: [&str; 4] = ["story_id", "collection_tag", "minutes_lo", "minutes_hi"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: usize,
    pub invariant: bool,
    pub reason: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.invariant { "invariant" } else { "parse" };
        write!(f, "line {} ({kind}): {}", self.line, self.reason)
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub users: Option<PathBuf>,
    pub stories: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub records: usize,
    pub registered_users: Vec<UserId>,
    pub registered_stories: Vec<StoryId>,
    /// Set when the log holds no records, so no period is defined.
    pub period_undefined: bool,
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::None)
        .from_reader(r)
}

fn check_header(rec: &csv::StringRecord, expected: &[&str]) -> Result<(), RowError> {
    if rec.iter().eq(expected.iter().copied()) {
        Ok(())
    } else {
        Err(RowError {
            line: 1,
            invariant: false,
            reason: format!("expected header '{}'", expected.join(",")),
        })
    }
}

fn field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    i: usize,
    name: &str,
    line: usize,
) -> Result<T, RowError> {
    rec.get(i)
        .ok_or_else(|| RowError {
            line,
            invariant: false,
            reason: format!("missing field {name}"),
        })?
        .parse()
        .map_err(|_| RowError {
            line,
            invariant: false,
            reason: format!("bad {name} '{}'", &rec[i]),
        })
}

fn rows<R: Read>(r: R, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>, LogError> {
    let mut rd = reader(r);
    let mut out = Vec::new();
    let mut first = true;
    for (i, rec) in rd.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| LogError::Parse {
            line,
            reason: e.to_string(),
        })?;
        if first {
            first = false;
            check_header(&rec, header).map_err(|e| LogError::Parse {
                line: e.line,
                reason: e.reason,
            })?;
            continue;
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn rejected(errors: Vec<RowError>) -> Result<(), LogError> {
    if errors.is_empty() {
        Ok(())
    } else {
        Err(LogError::Rejected(errors))
    }
}

/// Read a user-profile sidecar.
pub fn read_users<R: Read>(r: R) -> Result<BTreeMap<UserId, UserProfile>, LogError> {
    let mut out = BTreeMap::new();
    let mut errors = Vec::new();
    for (line, rec) in rows(r, &USER_HEADER)? {
        let parsed = (|| {
            if rec.len() != USER_HEADER.len() {
                return Err(RowError {
                    line,
                    invariant: false,
                    reason: format!("expected {} fields", USER_HEADER.len()),
                });
            }
            let user_id = UserId(field(&rec, 0, "user_id", line)?);
            let grade: u8 = field(&rec, 1, "grade", line)?;
            let channel = Channel::parse(&rec[2]).ok_or_else(|| RowError {
                line,
                invariant: false,
                reason: format!("bad channel '{}'", &rec[2]),
            })?;
            let registration_day = field(&rec, 3, "registration_day", line)?;
            if !DEFAULT_GRADES.contains(&grade) {
                return Err(RowError {
                    line,
                    invariant: true,
                    reason: format!("grade {grade} outside 1..=8"),
                });
            }
            Ok(UserProfile {
                user_id,
                grade,
                channel,
                registration_day,
            })
        })();
        match parsed {
            Ok(p) => {
                if out.insert(p.user_id, p).is_some() {
                    errors.push(RowError {
                        line,
                        invariant: true,
                        reason: "duplicate user_id".into(),
                    });
                }
            }
            Err(e) => errors.push(e),
        }
    }
    rejected(errors)?;
    Ok(out)
}

/// Read a story-metadata sidecar.
pub fn read_stories<R: Read>(r: R) -> Result<BTreeMap<StoryId, StoryMeta>, LogError> {
    let mut out = BTreeMap::new();
    let mut errors = Vec::new();
    for (line, rec) in rows(r, &STORY_HEADER)? {
        let parsed = (|| {
            if rec.len() != STORY_HEADER.len() {
                return Err(RowError {
                    line,
                    invariant: false,
                    reason: format!("expected {} fields", STORY_HEADER.len()),
                });
            }
            let story_id = StoryId(field(&rec, 0, "story_id", line)?);
            let minutes_lo: f64 = field(&rec, 2, "minutes_lo", line)?;
            let minutes_hi: f64 = field(&rec, 3, "minutes_hi", line)?;
            if !(minutes_lo > 0.0 && minutes_lo <= minutes_hi && minutes_hi.is_finite()) {
                return Err(RowError {
                    line,
                    invariant: true,
                    reason: "reading time needs 0 < lo <= hi".into(),
                });
            }
            Ok(StoryMeta {
                story_id,
                collection_tag: rec[1].to_string(),
                minutes_lo,
                minutes_hi,
            })
        })();
        match parsed {
            Ok(s) => {
                if out.insert(s.story_id, s).is_some() {
                    errors.push(RowError {
                        line,
                        invariant: true,
                        reason: "duplicate story_id".into(),
                    });
                }
            }
            Err(e) => errors.push(e),
        }
    }
    rejected(errors)?;
    Ok(out)
}

fn parse_record(line: usize, rec: &csv::StringRecord) -> Result<InteractionRecord, RowError> {
    if rec.len() != LOG_HEADER.len() {
        return Err(RowError {
            line,
            invariant: false,
            reason: format!("expected {} fields, got {}", LOG_HEADER.len(), rec.len()),
        });
    }
    let user_id = UserId(field(rec, 0, "user_id", line)?);
    let story_id = StoryId(field(rec, 1, "story_id", line)?);
    let day = field(rec, 2, "day", line)?;
    let session_id = field(rec, 3, "session_id", line)?;
    let section = Section::parse(&rec[4]);
    let slate_rank = if rec[5].is_empty() {
        None
    } else {
        let r: u32 = field(rec, 5, "slate_rank", line)?;
        if !(1..=MAX_SLATE_RANK as u32).contains(&r) {
            return Err(RowError {
                line,
                invariant: true,
                reason: format!("slate_rank {r} outside 1..={MAX_SLATE_RANK}"),
            });
        }
        Some(r as u8)
    };
    let outcome = OutcomeKind::parse(&rec[6]).ok_or_else(|| RowError {
        line,
        invariant: false,
        reason: format!("unknown outcome_kind '{}'", &rec[6]),
    })?;
    let r = InteractionRecord {
        user_id,
        story_id,
        day,
        session_id,
        section,
        slate_rank,
        outcome,
    };
    check_record(&r).map_err(|reason| RowError {
        line,
        invariant: true,
        reason,
    })?;
    Ok(r)
}

/// Parse a log and optional sidecars from readers.
pub fn ingest<R: Read>(
    log: R,
    users: Option<BTreeMap<UserId, UserProfile>>,
    stories: Option<BTreeMap<StoryId, StoryMeta>>,
) -> Result<(LogDataset, IngestReport), LogError> {
    let mut users = users.unwrap_or_default();
    let mut stories = stories.unwrap_or_default();
    let mut report = IngestReport::default();
    let mut errors = Vec::new();
    let mut records = Vec::new();
    let mut keys: HashMap<(UserId, StoryId, i32, u32), usize> = HashMap::new();
    for (line, rec) in rows(log, &LOG_HEADER)? {
        match parse_record(line, &rec) {
            Ok(r) => {
                if let Some(prev) = keys.insert((r.user_id, r.story_id, r.day, r.session_id), line)
                {
                    errors.push(RowError {
                        line,
                        invariant: true,
                        reason: format!("duplicate key, first seen on line {prev}"),
                    });
                    continue;
                }
                if !users.contains_key(&r.user_id) {
                    report.registered_users.push(r.user_id);
                    users.insert(
                        r.user_id,
                        UserProfile {
                            user_id: r.user_id,
                            grade: 1,
                            channel: Channel::B2C,
                            registration_day: r.day,
                        },
                    );
                }
                if !stories.contains_key(&r.story_id) {
                    report.registered_stories.push(r.story_id);
                    stories.insert(
                        r.story_id,
                        StoryMeta {
                            story_id: r.story_id,
                            collection_tag: "unknown".into(),
                            minutes_lo: 1.0,
                            minutes_hi: 1.0,
                        },
                    );
                }
                records.push(r);
            }
            Err(e) => errors.push(e),
        }
    }
    rejected(errors)?;
    let data = LogDataset::new(records, users, stories)?;
    report.records = data.len();
    report.period_undefined = data.period().is_none();
    Ok((data, report))
}

/// Read a log file plus optional sidecars.
pub fn ingest_log(
    path: &Path,
    opts: &IngestOptions,
) -> Result<(LogDataset, IngestReport), LogError> {
    let users = opts
        .users
        .as_ref()
        .map(|p| {
            std::fs::File::open(p)
                .map_err(LogError::from)
                .and_then(read_users)
        })
        .transpose()?;
    let stories = opts
        .stories
        .as_ref()
        .map(|p| {
            std::fs::File::open(p)
                .map_err(LogError::from)
                .and_then(read_stories)
        })
        .transpose()?;
    ingest(std::fs::File::open(path)?, users, stories)
}

pub fn emit_log<W: Write>(data: &LogDataset, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", LOG_HEADER.join(","))?;
    for r in data.records() {
        let rank = r.slate_rank.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.user_id,
            r.story_id,
            r.day,
            r.session_id,
            r.section.name(),
            rank,
            r.outcome.as_str()
        )?;
    }
    Ok(())
}

pub fn emit_users<W: Write>(data: &LogDataset, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", USER_HEADER.join(","))?;
    for u in data.users.values() {
        writeln!(
            w,
            "{},{},{},{}",
            u.user_id,
            u.grade,
            u.channel.as_str(),
            u.registration_day
        )?;
    }
    Ok(())
}

pub fn emit_stories<W: Write>(data: &LogDataset, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", STORY_HEADER.join(","))?;
    for s in data.stories.values() {
        writeln!(
            w,
            "{},{},{},{}",
            s.story_id, s.collection_tag, s.minutes_lo, s.minutes_hi
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "user_id,story_id,day,session_id,section,slate_rank,outcome_kind\n";

    #[test]
    fn empty_file_gives_empty_dataset() {
        let (d, rep) = ingest("".as_bytes(), None, None).unwrap();
        assert!(d.is_empty());
        assert!(rep.period_undefined);
        let (d, rep) = ingest(HEADER.as_bytes(), None, None).unwrap();
        assert!(d.is_empty() && rep.period_undefined);
    }

    #[test]
    fn three_lines() {
        let text = format!(
            "{HEADER}1,10,5,0,recommended_story,1,COMPLETED\n1,11,3,1,other,,VIEWED\n2,10,9,0,recommended_story,2,NOT_SHOWN\n"
        );
        let (d, rep) = ingest(text.as_bytes(), None, None).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.period(), Some((3, 9)));
        assert_eq!(rep.registered_users, vec![UserId(1), UserId(2)]);
        assert_eq!(rep.registered_stories.len(), 2);
    }

    #[test]
    fn numeric_outcome_rejected() {
        let text = format!("{HEADER}1,10,5,0,recommended_story,1,0.4\n");
        let err = ingest(text.as_bytes(), None, None).unwrap_err();
        assert_eq!(err.lines(), vec![2]);
        match err {
            LogError::Rejected(rows) => assert!(!rows[0].invariant),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn invariant_errors_report_lines() {
        let text = format!(
            "{HEADER}1,10,5,0,recommended_story,16,VIEWED\n1,10,5,0,other,,VIEWED\n1,10,5,0,other,,SKIPPED\n1,12,5,0,recommended_story,,VIEWED\n"
        );
        let err = ingest(text.as_bytes(), None, None).unwrap_err();
        assert_eq!(err.lines(), vec![2, 4, 5]);
    }

    #[test]
    fn bad_header() {
        let err = ingest("user,story\n".as_bytes(), None, None).unwrap_err();
        assert!(matches!(err, LogError::Parse { line: 1, .. }));
    }

    #[test]
    fn sidecars_parse() {
        let users = read_users("user_id,grade,channel,registration_day\n1,3,PAID,-10\n".as_bytes())
            .unwrap();
        assert_eq!(users[&UserId(1)].channel, Channel::Paid);
        let bad = read_users("user_id,grade,channel,registration_day\n1,9,PAID,0\n".as_bytes());
        assert!(bad.is_err());
        let stories = read_stories(
            "story_id,collection_tag,minutes_lo,minutes_hi\n4,animal,2,4\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(stories[&StoryId(4)].reading_time_midpoint(), 3.0);
        assert!(read_stories(
            "story_id,collection_tag,minutes_lo,minutes_hi\n4,animal,5,4\n".as_bytes()
        )
        .is_err());
    }
}
