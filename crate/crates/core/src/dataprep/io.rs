//! CSV event logs and the binary corpus file.
//!
//! Corpus layout (little-endian): the 14-byte magic `ASARS-CORPUS-1`, then
//! boundary timestamp, support thresholds, binning, item and user id
//! tables, train popularity counts, and the train and test session lists.
//! Strings are `u32` length + UTF-8 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{Corpus, Dataset, DwellBinning, Event, Session, Split, Support};
use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 14] = b"ASARS-CORPUS-1";

/// Reads `user_id,item_id,timestamp[,session_id]` rows with a header.
pub fn read_events_csv<R: Read>(reader: R) -> Result<Vec<Event>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ui), Some(ii), Some(ti)) = (col("user_id"), col("item_id"), col("timestamp")) else {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must contain user_id,item_id,timestamp; got {headers:?}"),
        });
    };
    let si = col("session_id");
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| -> Result<&str> {
            match rec.get(i) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(Error::Parse {
                    line,
                    msg: format!("missing column {}", headers.get(i).unwrap_or("?")),
                }),
            }
        };
        let timestamp: i64 = field(ti)?.parse().map_err(|_| Error::Parse {
            line,
            msg: format!(
                "timestamp {:?} is not an integer",
                rec.get(ti).unwrap_or("")
            ),
        })?;
        if timestamp < 0 {
            return Err(Error::Parse {
                line,
                msg: format!("negative timestamp {timestamp}"),
            });
        }
        out.push(Event {
            user_raw: field(ui)?.to_string(),
            item_raw: field(ii)?.to_string(),
            timestamp,
            session_raw: si
                .and_then(|i| rec.get(i))
                .filter(|s| !s.is_empty())
                .map(String::from),
        });
    }
    Ok(out)
}

/// Reads MovieLens `ratings.dat` lines (`user::item::rating::timestamp`),
/// treating every rating as a click.
pub fn read_movielens_ratings<R: Read>(reader: R) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    for (i, line) in std::io::BufRead::lines(BufReader::new(reader)).enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split("::").collect();
        if f.len() != 4 {
            return Err(bad(format!(
                "expected 4 '::'-separated fields, got {}",
                f.len()
            )));
        }
        let timestamp: i64 = f[3]
            .parse()
            .map_err(|_| bad(format!("timestamp {:?} is not an integer", f[3])))?;
        out.push(Event::new(f[0], f[1], timestamp));
    }
    Ok(out)
}

/// Writes events in the same CSV layout `read_events_csv` accepts.
pub fn write_events_csv<W: Write>(writer: W, events: &[Event]) -> Result<()> {
    let with_sessions = events.iter().any(|e| e.session_raw.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    if with_sessions {
        w.write_record(["user_id", "item_id", "timestamp", "session_id"])
            .map_err(io)?;
    } else {
        w.write_record(["user_id", "item_id", "timestamp"])
            .map_err(io)?;
    }
    for e in events {
        let ts = e.timestamp.to_string();
        if with_sessions {
            let sid = e.session_raw.as_deref().unwrap_or("");
            w.write_record([e.user_raw.as_str(), &e.item_raw, &ts, sid])
                .map_err(io)?;
        } else {
            w.write_record([e.user_raw.as_str(), &e.item_raw, &ts])
                .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid UTF-8 id: {e}")))
}

fn write_sessions<W: Write>(w: &mut W, sessions: &[Session]) -> Result<()> {
    w.write_u64::<LE>(sessions.len() as u64)?;
    for s in sessions {
        w.write_u32::<LE>(s.user as u32)?;
        w.write_u32::<LE>(s.items.len() as u32)?;
        for &i in &s.items {
            w.write_u32::<LE>(i as u32)?;
        }
        for &t in &s.timestamps {
            w.write_i64::<LE>(t)?;
        }
        for &d in &s.dwell {
            w.write_f64::<LE>(d)?;
        }
        for &b in &s.time_bins {
            w.write_u32::<LE>(b as u32)?;
        }
    }
    Ok(())
}

fn read_sessions<R: Read>(r: &mut R, num_items: usize, num_users: usize) -> Result<Vec<Session>> {
    let n = r.read_u64::<LE>()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let user = r.read_u32::<LE>()? as usize;
        let len = r.read_u32::<LE>()? as usize;
        if len == 0 || user >= num_users {
            return Err(Error::Format("corrupt session record".into()));
        }
        let items = (0..len)
            .map(|_| r.read_u32::<LE>().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if items.iter().any(|&i| i >= num_items) {
            return Err(Error::Format("session references an unknown item".into()));
        }
        let timestamps = (0..len)
            .map(|_| r.read_i64::<LE>())
            .collect::<Result<Vec<_>, _>>()?;
        let dwell = (0..len - 1)
            .map(|_| r.read_f64::<LE>())
            .collect::<Result<Vec<_>, _>>()?;
        let time_bins = (0..len - 1)
            .map(|_| r.read_u32::<LE>().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(Session {
            user,
            start_ts: timestamps[0],
            end_ts: timestamps[len - 1],
            items,
            timestamps,
            dwell,
            time_bins,
        });
    }
    Ok(out)
}

/// Serializes a dataset. Output bytes are a pure function of the dataset.
pub fn write_dataset<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    w.write_i64::<LE>(ds.boundary_ts)?;
    w.write_u32::<LE>(ds.support.min_item_events as u32)?;
    w.write_u32::<LE>(ds.support.min_session_len as u32)?;
    w.write_u32::<LE>(ds.support.min_user_sessions as u32)?;
    let b = &ds.binning;
    w.write_f64::<LE>(b.width)?;
    w.write_u32::<LE>(b.num_bins as u32)?;
    w.write_f64::<LE>(b.cap)?;
    w.write_u8(b.fitted_on_train as u8)?;
    w.write_u64::<LE>(ds.train.item_ids.len() as u64)?;
    for s in &ds.train.item_ids {
        write_str(w, s)?;
    }
    w.write_u64::<LE>(ds.train.user_ids.len() as u64)?;
    for s in &ds.train.user_ids {
        write_str(w, s)?;
    }
    for &p in &ds.train.popularity {
        w.write_u64::<LE>(p)?;
    }
    write_sessions(w, &ds.train.sessions)?;
    write_sessions(w, &ds.test.sessions)?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 14];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a corpus header".into()))?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(CORPUS_MAGIC),
            String::from_utf8_lossy(&magic)
        )));
    }
    let boundary_ts = r.read_i64::<LE>()?;
    let support = Support {
        min_item_events: r.read_u32::<LE>()? as usize,
        min_session_len: r.read_u32::<LE>()? as usize,
        min_user_sessions: r.read_u32::<LE>()? as usize,
    };
    let width = r.read_f64::<LE>()?;
    let num_bins = r.read_u32::<LE>()? as usize;
    let cap = r.read_f64::<LE>()?;
    let fitted_on_train = r.read_u8()? != 0;
    if num_bins == 0 || width <= 0.0 {
        return Err(Error::Format("corrupt binning header".into()));
    }
    let binning = DwellBinning {
        width,
        num_bins,
        edges: (0..num_bins).map(|k| k as f64 * width).collect(),
        cap,
        fitted_on_train,
    };
    let n_items = r.read_u64::<LE>()? as usize;
    let item_ids = (0..n_items)
        .map(|_| read_str(r))
        .collect::<Result<Vec<_>>>()?;
    let n_users = r.read_u64::<LE>()? as usize;
    let user_ids = (0..n_users)
        .map(|_| read_str(r))
        .collect::<Result<Vec<_>>>()?;
    let popularity = (0..n_items)
        .map(|_| r.read_u64::<LE>())
        .collect::<Result<Vec<_>, _>>()?;
    let train_sessions = read_sessions(r, n_items, n_users)?;
    let test_sessions = read_sessions(r, n_items, n_users)?;
    let train = Corpus::from_sessions(
        Split::Train,
        train_sessions,
        item_ids.clone(),
        user_ids.clone(),
    );
    if train.popularity != popularity {
        return Err(Error::Format(
            "popularity counts disagree with training sessions".into(),
        ));
    }
    let test = Corpus::from_sessions(Split::Test, test_sessions, item_ids, user_ids);
    Ok(Dataset {
        train,
        test,
        binning,
        boundary_ts,
        support,
    })
}

pub fn write_corpus_file(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn read_corpus_file(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset(&mut r)
}
