//! Text formats for `best.dat`, `lock` and `changes.log`.

use std::fmt::Write as _;

use crate::objective::ConfigVector;

use super::CoordError;

/// 64-bit FNV-1a.
pub fn checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// 17 significant digits: enough for an exact `f64` round trip.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Worker ids end up inside space- and line-delimited records.
pub fn sanitize_id(id: &str) -> String {
    let cleaned: String =
        id.chars().map(|c| if c.is_whitespace() || c == '=' { '_' } else { c }).collect();
    if cleaned.is_empty() {
        "_".to_string()
    } else {
        cleaned
    }
}

/// The global best configuration and its performance.
#[derive(Debug, Clone, PartialEq)]
pub struct BestState {
    pub version: u64,
    pub config: ConfigVector,
    pub performance: f64,
    /// Performance was extrapolated by adding a delta, not measured.
    pub estimated: bool,
    pub updated_by: String,
    pub updated_at: f64,
}

impl BestState {
    pub fn encode(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "version={}", self.version);
        let _ = writeln!(out, "performance={}", format_real(self.performance));
        let _ = writeln!(out, "estimated={}", u8::from(self.estimated));
        let _ = writeln!(out, "updated_by={}", sanitize_id(&self.updated_by));
        let _ = writeln!(out, "updated_at={}", self.updated_at);
        let _ = writeln!(out, "n={}", self.config.len());
        let _ = writeln!(out, "config={}", self.config);
        let sum = checksum(out.as_bytes());
        let _ = writeln!(out, "checksum={sum:016x}");
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CoordError> {
        const FILE: &str = "best.dat";
        let bad = |line: usize, message: String| CoordError::Format { file: FILE, line, message };
        let text = std::str::from_utf8(bytes).map_err(|e| bad(0, format!("not UTF-8: {e}")))?;

        let keys = ["version", "performance", "estimated", "updated_by", "updated_at", "n", "config"];
        let mut values = Vec::with_capacity(keys.len());
        let mut offset = 0;
        let mut lines = text.split_inclusive('\n');
        for (i, key) in keys.iter().enumerate() {
            let raw = lines.next().ok_or_else(|| bad(i + 1, format!("missing `{key}` line")))?;
            let line = raw
                .strip_suffix('\n')
                .ok_or_else(|| bad(i + 1, format!("unterminated line {raw:?}")))?;
            let value = line
                .strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .ok_or_else(|| bad(i + 1, format!("expected `{key}=...`, found {line:?}")))?;
            values.push(value);
            offset += raw.len();
        }
        let line_no = keys.len() + 1;
        let tail = lines.next().ok_or_else(|| bad(line_no, "missing checksum line".into()))?;
        let stored = tail
            .strip_suffix('\n')
            .and_then(|l| l.strip_prefix("checksum="))
            .filter(|h| h.len() == 16)
            .and_then(|h| u64::from_str_radix(h, 16).ok())
            .ok_or_else(|| bad(line_no, format!("malformed checksum line {tail:?}")))?;
        if lines.next().is_some() {
            return Err(bad(line_no + 1, "trailing data after checksum".into()));
        }
        let actual = checksum(&bytes[..offset]);
        if actual != stored {
            return Err(bad(line_no, format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}")));
        }

        let version = values[0].parse().map_err(|e| bad(1, format!("version: {e}")))?;
        let performance: f64 = values[1].parse().map_err(|e| bad(2, format!("performance: {e}")))?;
        if !performance.is_finite() {
            return Err(bad(2, "performance is not finite".into()));
        }
        let estimated = match values[2] {
            "0" => false,
            "1" => true,
            other => return Err(bad(3, format!("estimated must be 0 or 1, found {other:?}"))),
        };
        let updated_by = values[3].to_string();
        let updated_at = values[4].parse().map_err(|e| bad(5, format!("updated_at: {e}")))?;
        let n: usize = values[5].parse().map_err(|e| bad(6, format!("n: {e}")))?;
        let config: ConfigVector = values[6].parse().map_err(|e| bad(7, format!("config: {e}")))?;
        if config.len() != n {
            return Err(bad(7, format!("config has {} elements, n={n}", config.len())));
        }
        Ok(Self { version, config, performance, estimated, updated_by, updated_at })
    }
}

/// Contents of the `lock` file.
#[derive(Debug, Clone, PartialEq)]
pub struct LockRecord {
    pub owner: String,
    pub acquired_at: f64,
    pub stale_after: f64,
}

impl LockRecord {
    pub fn encode(&self) -> String {
        format!(
            "owner={}\nacquired_at={}\nstale_after={}\n",
            sanitize_id(&self.owner),
            self.acquired_at,
            self.stale_after
        )
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let text = std::str::from_utf8(bytes).ok()?;
        let mut lines = text.lines();
        let owner = lines.next()?.strip_prefix("owner=")?.to_string();
        let acquired_at = lines.next()?.strip_prefix("acquired_at=")?.parse().ok()?;
        let stale_after = lines.next()?.strip_prefix("stale_after=")?.parse().ok()?;
        Some(Self { owner, acquired_at, stale_after })
    }
}

/// One line of `changes.log`: `version index new_value delta proposer evaluations`.
///
/// `evaluations` is the proposer's count of evaluations since its previous
/// commit, which lets workers estimate fleet-wide effort.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeRecord {
    pub version: u64,
    pub index: usize,
    pub new_value: u32,
    pub delta: f64,
    pub proposer: String,
    pub evaluations: u64,
}

impl ChangeRecord {
    pub fn encode(&self) -> String {
        format!(
            "{} {} {} {} {} {}\n",
            self.version,
            self.index,
            self.new_value,
            format_real(self.delta),
            sanitize_id(&self.proposer),
            self.evaluations
        )
    }

    pub fn decode(line: &str) -> Option<Self> {
        let mut f = line.split_whitespace();
        let rec = Self {
            version: f.next()?.parse().ok()?,
            index: f.next()?.parse().ok()?,
            new_value: f.next()?.parse().ok()?,
            delta: f.next()?.parse().ok()?,
            proposer: f.next()?.to_string(),
            evaluations: f.next().map_or(Some(0), |s| s.parse().ok())?,
        };
        Some(rec)
    }
}
