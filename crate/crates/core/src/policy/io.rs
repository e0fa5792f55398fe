//! Text formats: editorial scripts (`grade,week,rank,story_id`), position
//! effects (one non-negative real per line) and slate dumps
//! (`user_id,week,day,rank,story_id`).

use super::{EditorialScript, PolicyError};
use crate::log::{StoryId, UserId};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

const SCRIPT_HEADER: &str = "grade,week,rank,story_id";

pub fn write_script<W: Write>(script: &EditorialScript, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{SCRIPT_HEADER}")?;
    for ((g, wk), stories) in &script.rankings {
        for (r, s) in stories.iter().enumerate() {
            writeln!(w, "{g},{wk},{},{}", r + 1, s)?;
        }
    }
    Ok(())
}

pub fn read_script<R: Read>(r: R) -> Result<EditorialScript, PolicyError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut rows: BTreeMap<(u8, i32), Vec<(u32, StoryId)>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let bad = |reason: String| PolicyError::Parse {
            what: "editorial script",
            line,
            reason,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", rec.len())));
        }
        let grade: u8 = rec[0].parse().map_err(|_| bad("bad grade".into()))?;
        let week: i32 = rec[1].parse().map_err(|_| bad("bad week".into()))?;
        let rank: u32 = rec[2].parse().map_err(|_| bad("bad rank".into()))?;
        let story: u32 = rec[3].parse().map_err(|_| bad("bad story_id".into()))?;
        rows.entry((grade, week))
            .or_default()
            .push((rank, StoryId(story)));
    }
    let mut script = EditorialScript::default();
    for (key, mut v) in rows {
        v.sort();
        script
            .rankings
            .insert(key, v.into_iter().map(|x| x.1).collect());
    }
    Ok(script)
}

pub fn write_position_effects<W: Write>(pe: &[f64], mut w: W) -> std::io::Result<()> {
    for p in pe {
        writeln!(w, "{p}")?;
    }
    Ok(())
}

pub fn read_position_effects<R: Read>(r: R) -> Result<Vec<f64>, PolicyError> {
    let mut out = Vec::new();
    for (i, l) in BufReader::new(r).lines().enumerate() {
        let l = l?;
        let t = l.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| PolicyError::Parse {
            what: "position effects",
            line: i + 1,
            reason: format!("'{t}'"),
        })?;
        if !v.is_finite() || v < 0.0 {
            return Err(PolicyError::InvalidPositionEffects);
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlateDumpRow {
    pub user: UserId,
    pub week: i32,
    pub day: i32,
    pub rank: usize,
    pub story: StoryId,
}

pub fn write_slates<W: Write>(rows: &[SlateDumpRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "user_id,week,day,rank,story_id")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.user, r.week, r.day, r.rank, r.story)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_round_trip() {
        let mut s = EditorialScript::default();
        s.rankings.insert((2, 0), vec![StoryId(5), StoryId(1)]);
        s.rankings.insert((3, 1), vec![StoryId(9)]);
        let mut buf = Vec::new();
        write_script(&s, &mut buf).unwrap();
        assert_eq!(read_script(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn script_rank_order_wins_over_line_order() {
        let t = "grade,week,rank,story_id\n1,0,2,10\n1,0,1,20\n";
        assert_eq!(
            read_script(t.as_bytes()).unwrap().rankings[&(1, 0)],
            vec![StoryId(20), StoryId(10)]
        );
        assert!(read_script("grade,week,rank,story_id\n1,x,1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn position_effects_round_trip() {
        let pe = vec![0.3, 0.1, 1e-3];
        let mut buf = Vec::new();
        write_position_effects(&pe, &mut buf).unwrap();
        assert_eq!(read_position_effects(buf.as_slice()).unwrap(), pe);
        assert_eq!(
            read_position_effects("0.1\n-1\n".as_bytes()),
            Err(PolicyError::InvalidPositionEffects)
        );
    }
}
