//! Single-file SQLite store with an append-only JSONL audit log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::Rng;
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use super::*;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS sessions (
    session_id TEXT PRIMARY KEY,
    reader_id TEXT NOT NULL UNIQUE
);
CREATE TABLE IF NOT EXISTS items (
    session_id TEXT NOT NULL REFERENCES sessions(session_id),
    display_id INTEGER NOT NULL,
    output_id TEXT NOT NULL,
    image_path TEXT NOT NULL,
    PRIMARY KEY (session_id, display_id),
    UNIQUE (session_id, output_id)
);
CREATE TABLE IF NOT EXISTS reads (
    session_id TEXT NOT NULL,
    display_id INTEGER NOT NULL,
    reader_id TEXT NOT NULL,
    output_id TEXT NOT NULL,
    labels TEXT NOT NULL,
    notes TEXT NOT NULL,
    revision INTEGER NOT NULL,
    artificial INTEGER,
    extra_anomaly INTEGER,
    updated_at TEXT NOT NULL,
    PRIMARY KEY (session_id, display_id),
    UNIQUE (reader_id, output_id)
);
";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub reader_id: String,
    pub total: usize,
    pub completed: usize,
}

/// All writes go through one connection lock, so writes to a session are
/// serialized and analytics read a consistent snapshot.
pub struct ReaderStore {
    conn: Mutex<Connection>,
    audit: Mutex<File>,
    dir: PathBuf,
}

fn encode_labels(labels: &[ReadLabel]) -> String {
    labels.iter().map(|l| l.to_string()).collect()
}

fn decode_labels(s: &str) -> Result<Vec<ReadLabel>, ReaderError> {
    s.chars()
        .map(|c| {
            let v = c.to_digit(10).unwrap_or(9) as u8;
            ReadLabel::try_from(v).map_err(ReaderError::Validation)
        })
        .collect()
}

fn opt_flag(v: Option<i64>) -> Option<bool> {
    v.map(|x| x != 0)
}

impl ReaderStore {
    /// Opens or creates `reader.sqlite` and `audit.jsonl` under `dir`.
    pub fn open(dir: &Path) -> Result<Self, ReaderError> {
        std::fs::create_dir_all(dir)?;
        let conn = Connection::open(dir.join("reader.sqlite"))?;
        conn.execute_batch(SCHEMA)?;
        let audit = OpenOptions::new().create(true).append(true).open(dir.join("audit.jsonl"))?;
        Ok(ReaderStore {
            conn: Mutex::new(conn),
            audit: Mutex::new(audit),
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn audit(&self, event: serde_json::Value) -> Result<(), ReaderError> {
        let mut entry = serde_json::json!({ "ts": chrono::Utc::now().to_rfc3339() });
        if let (Some(e), serde_json::Value::Object(fields)) = (entry.as_object_mut(), event) {
            e.extend(fields);
        }
        let mut f = self.audit.lock().expect("audit lock");
        writeln!(f, "{entry}")?;
        f.flush()?;
        Ok(())
    }

    /// Persists sessions with opaque random session ids. `images` maps
    /// each output id to its image file.
    pub fn install(
        &self,
        sessions: &[ReaderSession],
        images: &HashMap<String, String>,
    ) -> Result<Vec<SessionInfo>, ReaderError> {
        let mut conn = self.conn.lock().expect("store lock");
        let tx = conn.transaction()?;
        let mut out = vec![];
        let mut rng = rand::rng();
        for s in sessions {
            let session_id = format!("{:032x}", rng.random::<u128>());
            tx.execute(
                "INSERT INTO sessions (session_id, reader_id) VALUES (?1, ?2)",
                params![session_id, s.reader_id],
            )
            .map_err(|e| match e {
                rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::ConstraintViolation => {
                    ReaderError::Conflict(format!("reader {} already has a session", s.reader_id))
                }
                e => e.into(),
            })?;
            for it in &s.items {
                let path = images
                    .get(&it.output_id)
                    .ok_or_else(|| ReaderError::Argument(format!("no image for {}", it.output_id)))?;
                tx.execute(
                    "INSERT INTO items (session_id, display_id, output_id, image_path) VALUES (?1, ?2, ?3, ?4)",
                    params![session_id, it.display_id, it.output_id, path],
                )?;
            }
            out.push(SessionInfo {
                session_id,
                reader_id: s.reader_id.clone(),
                total: s.items.len(),
                completed: 0,
            });
        }
        tx.commit()?;
        drop(conn);
        for info in &out {
            self.audit(serde_json::json!({
                "op": "install",
                "session_id": info.session_id,
                "reader_id": info.reader_id,
                "items": info.total,
            }))?;
        }
        Ok(out)
    }

    fn reader_of(conn: &Connection, session_id: &str) -> Result<String, ReaderError> {
        conn.query_row(
            "SELECT reader_id FROM sessions WHERE session_id = ?1",
            [session_id],
            |r| r.get(0),
        )
        .optional()?
        .ok_or_else(|| ReaderError::NotFound("unknown session".into()))
    }

    fn progress_locked(conn: &Connection, session_id: &str) -> Result<Progress, ReaderError> {
        let total: i64 = conn.query_row("SELECT COUNT(*) FROM items WHERE session_id = ?1", [session_id], |r| r.get(0))?;
        let completed: i64 = conn.query_row("SELECT COUNT(*) FROM reads WHERE session_id = ?1", [session_id], |r| r.get(0))?;
        Ok(Progress {
            completed: completed as usize,
            total: total as usize,
        })
    }

    pub fn sessions(&self) -> Result<Vec<SessionInfo>, ReaderError> {
        let conn = self.conn.lock().expect("store lock");
        let mut stmt = conn.prepare("SELECT session_id, reader_id FROM sessions ORDER BY reader_id")?;
        let rows: Vec<(String, String)> = stmt
            .query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?
            .collect::<Result<_, _>>()?;
        rows.into_iter()
            .map(|(session_id, reader_id)| {
                let p = Self::progress_locked(&conn, &session_id)?;
                Ok(SessionInfo {
                    session_id,
                    reader_id,
                    total: p.total,
                    completed: p.completed,
                })
            })
            .collect()
    }

    /// Server-side session with the display-id mapping.
    pub fn session(&self, session_id: &str) -> Result<ReaderSession, ReaderError> {
        let conn = self.conn.lock().expect("store lock");
        let reader_id = Self::reader_of(&conn, session_id)?;
        let mut stmt =
            conn.prepare("SELECT display_id, output_id FROM items WHERE session_id = ?1 ORDER BY display_id")?;
        let items = stmt
            .query_map([session_id], |r| {
                Ok(SessionItem {
                    display_id: r.get(0)?,
                    output_id: r.get(1)?,
                })
            })?
            .collect::<Result<_, _>>()?;
        Ok(ReaderSession { reader_id, items })
    }

    pub fn progress(&self, session_id: &str) -> Result<Progress, ReaderError> {
        let conn = self.conn.lock().expect("store lock");
        Self::reader_of(&conn, session_id)?;
        Self::progress_locked(&conn, session_id)
    }

    /// First unread item in display order, `None` once the session is done.
    pub fn next(&self, session_id: &str) -> Result<Option<NextItem>, ReaderError> {
        let conn = self.conn.lock().expect("store lock");
        Self::reader_of(&conn, session_id)?;
        let display_id: Option<u32> = conn
            .query_row(
                "SELECT i.display_id FROM items i
                 LEFT JOIN reads r ON r.session_id = i.session_id AND r.display_id = i.display_id
                 WHERE i.session_id = ?1 AND r.display_id IS NULL
                 ORDER BY i.display_id LIMIT 1",
                [session_id],
                |r| r.get(0),
            )
            .optional()?;
        Ok(display_id.map(|d| NextItem {
            display_id: d,
            image_url: format!("/session/{session_id}/image/{d}"),
            finding_names: READ_FINDINGS.iter().map(|s| s.to_string()).collect(),
        }))
    }

    pub fn image_path(&self, session_id: &str, display_id: u32) -> Result<PathBuf, ReaderError> {
        let conn = self.conn.lock().expect("store lock");
        conn.query_row(
            "SELECT image_path FROM items WHERE session_id = ?1 AND display_id = ?2",
            params![session_id, display_id],
            |r| r.get::<_, String>(0),
        )
        .optional()?
        .map(PathBuf::from)
        .ok_or_else(|| ReaderError::NotFound(format!("display id {display_id}")))
    }

    /// Stores a read. Flags start unadjudicated when the notes are
    /// nonempty and false otherwise.
    pub fn record_read(&self, session_id: &str, sub: &ReadSubmission) -> Result<ReadAck, ReaderError> {
        let labels = validate_labels(&sub.labels)?;
        let mut conn = self.conn.lock().expect("store lock");
        let tx = conn.transaction()?;
        let reader_id = Self::reader_of(&tx, session_id)?;
        let output_id: String = tx
            .query_row(
                "SELECT output_id FROM items WHERE session_id = ?1 AND display_id = ?2",
                params![session_id, sub.display_id],
                |r| r.get(0),
            )
            .optional()?
            .ok_or_else(|| ReaderError::NotFound(format!("display id {} is not in this session", sub.display_id)))?;
        let existing: Option<u32> = tx
            .query_row(
                "SELECT revision FROM reads WHERE session_id = ?1 AND display_id = ?2",
                params![session_id, sub.display_id],
                |r| r.get(0),
            )
            .optional()?;
        let revision = match (existing, sub.revision) {
            (Some(_), false) => {
                return Err(ReaderError::Conflict(format!(
                    "display id {} was already read; resubmit as a revision",
                    sub.display_id
                )))
            }
            (Some(r), true) => r + 1,
            (None, _) => 0,
        };
        let flag: Option<i64> = sub.notes.trim().is_empty().then_some(0);
        tx.execute(
            "INSERT OR REPLACE INTO reads
             (session_id, display_id, reader_id, output_id, labels, notes, revision, artificial, extra_anomaly, updated_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?8, ?9)",
            params![
                session_id,
                sub.display_id,
                reader_id,
                output_id,
                encode_labels(&labels),
                sub.notes,
                revision,
                flag,
                chrono::Utc::now().to_rfc3339(),
            ],
        )?;
        let progress = Self::progress_locked(&tx, session_id)?;
        tx.commit()?;
        drop(conn);
        self.audit(serde_json::json!({
            "op": "read",
            "session_id": session_id,
            "reader_id": reader_id,
            "display_id": sub.display_id,
            "output_id": output_id,
            "labels": encode_labels(&labels),
            "revision": revision,
        }))?;
        Ok(ReadAck {
            display_id: sub.display_id,
            revision,
            progress,
        })
    }

    /// All reads ordered by reader then output id.
    pub fn reads(&self) -> Result<Vec<ReadRecord>, ReaderError> {
        let conn = self.conn.lock().expect("store lock");
        let mut stmt = conn.prepare(
            "SELECT reader_id, output_id, labels, notes, artificial, extra_anomaly FROM reads
             ORDER BY reader_id, output_id",
        )?;
        let raw: Vec<(String, String, String, String, Option<i64>, Option<i64>)> = stmt
            .query_map([], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?)))?
            .collect::<Result<_, _>>()?;
        raw.into_iter()
            .map(|(reader_id, output_id, labels, notes, a, x)| {
                Ok(ReadRecord {
                    reader_id,
                    output_id,
                    labels: decode_labels(&labels)?,
                    notes,
                    artificial_flag: opt_flag(a),
                    extra_anomaly_flag: opt_flag(x),
                })
            })
            .collect()
    }

    /// One row per assigned scan, in display order.
    pub fn session_rows(&self, session_id: &str) -> Result<Vec<SessionCsvRow>, ReaderError> {
        let conn = self.conn.lock().expect("store lock");
        Self::reader_of(&conn, session_id)?;
        let mut stmt = conn.prepare(
            "SELECT i.display_id, r.labels, r.notes FROM items i
             LEFT JOIN reads r ON r.session_id = i.session_id AND r.display_id = i.display_id
             WHERE i.session_id = ?1 ORDER BY i.display_id",
        )?;
        let raw: Vec<(u32, Option<String>, Option<String>)> = stmt
            .query_map([session_id], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?
            .collect::<Result<_, _>>()?;
        raw.into_iter()
            .map(|(display_id, labels, notes)| {
                Ok(SessionCsvRow {
                    display_id,
                    labels: match labels {
                        Some(l) => decode_labels(&l)?.into_iter().map(Some).collect(),
                        None => vec![None; READ_FINDINGS.len()],
                    },
                    notes: notes.unwrap_or_default(),
                })
            })
            .collect()
    }

    pub fn export_session_csv<W: Write>(&self, session_id: &str, w: W) -> Result<(), ReaderError> {
        write_session_csv(w, &self.session_rows(session_id)?)
    }

    pub fn export_reads_csv<W: Write>(&self, w: W) -> Result<(), ReaderError> {
        write_reads_csv(w, &self.reads()?)
    }

    /// Reads with notes whose flags have not been set by a human yet.
    pub fn adjudication_queue(&self) -> Result<Vec<AdjudicationItem>, ReaderError> {
        Ok(self
            .reads()?
            .into_iter()
            .filter(|r| !r.is_adjudicated())
            .map(|r| AdjudicationItem {
                highlights: highlight_notes(&r.notes),
                reader_id: r.reader_id,
                output_id: r.output_id,
                notes: r.notes,
            })
            .collect())
    }

    pub fn adjudicate(&self, reader_id: &str, output_id: &str, d: AdjudicationDecision) -> Result<(), ReaderError> {
        let conn = self.conn.lock().expect("store lock");
        let n = conn.execute(
            "UPDATE reads SET artificial = ?1, extra_anomaly = ?2 WHERE reader_id = ?3 AND output_id = ?4",
            params![d.artificial as i64, d.extra_anomaly as i64, reader_id, output_id],
        )?;
        drop(conn);
        if n == 0 {
            return Err(ReaderError::NotFound(format!("no read of {output_id} by {reader_id}")));
        }
        self.audit(serde_json::json!({
            "op": "adjudicate",
            "reader_id": reader_id,
            "output_id": output_id,
            "artificial": d.artificial,
            "extra_anomaly": d.extra_anomaly,
        }))
    }
}
