//! TSV ingestion and serialization.
//!
//! One interaction per line: `user_id \t item_id \t timestamp \t dwell \t
//! engagement_code`, header required, UTF-8 with LF line endings. The last
//! interaction of each user becomes the held-out target. A `<path>.manifest`
//! sidecar (written by the synthetic generator) pins corpus size and lets
//! demographics be reconstructed; without it, demographics are zero-filled
//! and the corpus size is inferred from the largest item id.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::synth::{demographics_vector, SynthManifest};
use super::{Dataset, Interaction, UserRecord};
use crate::config::ConfigMap;
use crate::error::{Error, Result};

pub const TSV_HEADER: &str = "user_id\titem_id\ttimestamp\tdwell\tengagement_code";

fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(TSV_HEADER);
    out.push('\n');
    for user in &dataset.users {
        for it in user.history.iter().chain(std::iter::once(&user.target)) {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                user.user_id, it.item_id, it.timestamp, it.dwell, it.engagement
            );
        }
    }
    std::fs::write(path, out)?;
    if let Some(manifest) = &dataset.manifest {
        manifest.to_map().save(&manifest_path(path))?;
    }
    Ok(())
}

struct ParsedLine {
    user_id: u64,
    interaction: Interaction,
}

fn parse_line(line: &str) -> std::result::Result<ParsedLine, String> {
    let mut fields = line.split('\t');
    let mut next = |name: &str| fields.next().ok_or(format!("missing column {name}"));
    let user_id: u64 = next("user_id")?
        .parse()
        .map_err(|_| "user_id not an integer".to_string())?;
    let item_id: usize = next("item_id")?
        .parse()
        .map_err(|_| "item_id not an integer".to_string())?;
    let timestamp: i64 = next("timestamp")?
        .parse()
        .map_err(|_| "timestamp not an integer".to_string())?;
    let dwell: f64 = next("dwell")?
        .parse()
        .map_err(|_| "dwell not a number".to_string())?;
    let engagement: u8 = next("engagement_code")?
        .parse()
        .map_err(|_| "engagement_code not an integer".to_string())?;
    if fields.next().is_some() {
        return Err("too many columns".to_string());
    }
    if !dwell.is_finite() || !(0.0..=1.0).contains(&dwell) {
        return Err(format!("dwell {dwell} outside [0, 1]"));
    }
    if engagement > 2 {
        return Err(format!("engagement_code {engagement} outside 0..=2"));
    }
    Ok(ParsedLine {
        user_id,
        interaction: Interaction {
            item_id,
            timestamp,
            dwell,
            engagement,
        },
    })
}

/// Load a dataset. Any malformed line is a hard error carrying the first
/// offending line number and the count of malformed lines; ingestion never
/// silently truncates.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let manifest = {
        let mp = manifest_path(path);
        if mp.exists() {
            Some(SynthManifest::from_map(&ConfigMap::load(&mp)?)?)
        } else {
            None
        }
    };

    let mut lines = text.lines().enumerate();
    // A zero-byte file is an empty dataset; anything else must lead with the header.
    match lines.next() {
        None => {
            return Ok(Dataset {
                n_items: manifest.as_ref().map(|m| m.n_items).unwrap_or(0),
                users: Vec::new(),
                split: None,
                manifest,
                item_topics: None,
            });
        }
        Some((_, first)) if first == TSV_HEADER => {}
        Some((_, first)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {TSV_HEADER:?}, got {first:?}"),
            });
        }
    }

    let mut order: Vec<u64> = Vec::new();
    let mut per_user: HashMap<u64, Vec<Interaction>> = HashMap::new();
    let mut malformed: Vec<(usize, String)> = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(p) => {
                per_user
                    .entry(p.user_id)
                    .or_insert_with(|| {
                        order.push(p.user_id);
                        Vec::new()
                    })
                    .push(p.interaction);
            }
            Err(msg) => malformed.push((idx + 1, msg)),
        }
    }
    if let Some((line, msg)) = malformed.first() {
        return Err(Error::Parse {
            line: *line,
            msg: format!("{msg} ({} malformed line(s) total)", malformed.len()),
        });
    }

    let mut max_item = 0usize;
    let mut users = Vec::with_capacity(order.len());
    for user_id in order {
        let mut inter = per_user.remove(&user_id).expect("collected above");
        inter.sort_by_key(|i| i.timestamp);
        for it in &inter {
            max_item = max_item.max(it.item_id + 1);
        }
        let target = inter.pop().expect("at least one interaction per seen user");
        let demographics = match &manifest {
            Some(m) => demographics_vector(m.seed, user_id, m.d_u),
            None => Vec::new(),
        };
        users.push(UserRecord {
            user_id,
            demographics,
            history: inter,
            target,
        });
    }

    let n_items = match &manifest {
        Some(m) => {
            if max_item > m.n_items {
                return Err(Error::Integrity(format!(
                    "item id {} outside manifest corpus of {}",
                    max_item - 1,
                    m.n_items
                )));
            }
            m.n_items
        }
        None => max_item,
    };

    let ds = Dataset {
        n_items,
        users,
        split: None,
        manifest,
        item_topics: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Parse an inline interaction list (same TSV schema, header included) into
/// a single ad-hoc user for one-off retrieval requests. All lines stay in
/// the history; a synthetic target row is appended internally because the
/// record type requires one, and retrieval never reads it.
pub fn parse_single_user(text: &str) -> Result<UserRecord> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == TSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {TSV_HEADER:?}"),
            })
        }
    }
    let mut user_id = None;
    let mut history = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let p = parse_line(line).map_err(|msg| Error::Parse { line: idx + 1, msg })?;
        match user_id {
            None => user_id = Some(p.user_id),
            Some(u) if u != p.user_id => {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: "inline request must contain a single user".into(),
                })
            }
            _ => {}
        }
        history.push(p.interaction);
    }
    if history.is_empty() {
        return Err(Error::Argument("inline request has no interactions".into()));
    }
    history.sort_by_key(|i| i.timestamp);
    let last = history.last().expect("non-empty").clone();
    Ok(UserRecord {
        user_id: user_id.expect("non-empty"),
        demographics: Vec::new(),
        history,
        target: Interaction {
            item_id: last.item_id,
            timestamp: last.timestamp + 1,
            dwell: 0.0,
            engagement: 0,
        },
    })
}
