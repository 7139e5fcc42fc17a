//! Impressions and the seven categorical dimensions they are described by.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Level used for a ZIP that is missing or explicitly unknown.
pub const UNKNOWN_ZIP: &str = "unknown";

const HOUR_LEVELS: [&str; 24] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12", "13", "14", "15", "16",
    "17", "18", "19", "20", "21", "22", "23",
];

/// Feature dimensions, in the fixed order used for every summation of betas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Exchange,
    Hour,
    Day,
    AdFormat,
    AdSize,
    Domain,
    Zip,
}

impl Dimension {
    pub const ALL: [Dimension; 7] = [
        Dimension::Exchange,
        Dimension::Hour,
        Dimension::Day,
        Dimension::AdFormat,
        Dimension::AdSize,
        Dimension::Domain,
        Dimension::Zip,
    ];

    /// The small dimensions that every model includes in full.
    pub const BASE: [Dimension; 5] = [
        Dimension::Exchange,
        Dimension::Hour,
        Dimension::Day,
        Dimension::AdFormat,
        Dimension::AdSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Exchange => "exchange",
            Dimension::Hour => "hour",
            Dimension::Day => "day",
            Dimension::AdFormat => "ad_format",
            Dimension::AdSize => "ad_size",
            Dimension::Domain => "domain",
            Dimension::Zip => "zip",
        }
    }

    /// Position in [`Dimension::ALL`].
    pub fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dimension {
    type Err = ImpressionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| ImpressionError::UnknownDimension(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImpressionError {
    #[error("hour {0} outside 0..=23")]
    Hour(i64),
    #[error("day {0} outside 0..=6")]
    Day(i64),
    #[error("invalid domain {0:?}")]
    Domain(String),
    #[error("invalid zip {0:?}")]
    Zip(String),
    #[error("empty {0} field")]
    Empty(&'static str),
    #[error("unknown dimension {0:?}")]
    UnknownDimension(String),
}

/// One ad opportunity together with the campaign it was delivered for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Impression {
    pub exchange: String,
    pub hour: u8,
    pub day: u8,
    pub ad_format: String,
    pub ad_size: String,
    pub domain: String,
    pub zip: String,
    pub campaign: String,
    pub clicked: bool,
    #[serde(rename = "ts")]
    pub timestamp: i64,
}

impl Impression {
    /// Builds an impression from raw field values, normalizing domain and zip.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        exchange: &str,
        hour: i64,
        day: i64,
        ad_format: &str,
        ad_size: &str,
        domain: &str,
        zip: &str,
        campaign: &str,
        clicked: bool,
        timestamp: i64,
    ) -> Result<Self, ImpressionError> {
        if !(0..=23).contains(&hour) {
            return Err(ImpressionError::Hour(hour));
        }
        if !(0..=6).contains(&day) {
            return Err(ImpressionError::Day(day));
        }
        let non_empty = |v: &str, name: &'static str| {
            let v = v.trim();
            if v.is_empty() {
                Err(ImpressionError::Empty(name))
            } else {
                Ok(v.to_string())
            }
        };
        Ok(Impression {
            exchange: non_empty(exchange, "exchange")?,
            hour: hour as u8,
            day: day as u8,
            ad_format: non_empty(ad_format, "ad_format")?,
            ad_size: non_empty(ad_size, "ad_size")?,
            domain: normalize_domain(domain)?,
            zip: normalize_zip(zip)?,
            campaign: non_empty(campaign, "campaign")?,
            clicked,
            timestamp,
        })
    }

    /// Level string of this impression along `dim`.
    pub fn level(&self, dim: Dimension) -> &str {
        match dim {
            Dimension::Exchange => &self.exchange,
            Dimension::Hour => HOUR_LEVELS[self.hour as usize % 24],
            Dimension::Day => HOUR_LEVELS[self.day as usize % 24],
            Dimension::AdFormat => &self.ad_format,
            Dimension::AdSize => &self.ad_size,
            Dimension::Domain => &self.domain,
            Dimension::Zip => &self.zip,
        }
    }

    /// Re-validates a value that may have been built field by field.
    pub fn validate(&self) -> Result<(), ImpressionError> {
        let rebuilt = Impression::new(
            &self.exchange,
            self.hour as i64,
            self.day as i64,
            &self.ad_format,
            &self.ad_size,
            &self.domain,
            &self.zip,
            &self.campaign,
            self.clicked,
            self.timestamp,
        )?;
        if rebuilt.domain != self.domain {
            return Err(ImpressionError::Domain(self.domain.clone()));
        }
        if rebuilt.zip != self.zip {
            return Err(ImpressionError::Zip(self.zip.clone()));
        }
        Ok(())
    }
}

/// Lowercases a hostname and drops scheme, port, path and query.
/// Subdomains are kept: `finance.yahoo.com` and `yahoo.com` stay distinct.
pub fn normalize_domain(raw: &str) -> Result<String, ImpressionError> {
    let lowered = raw.trim().to_ascii_lowercase();
    let mut host = lowered.as_str();
    if let Some(pos) = host.find("://") {
        host = &host[pos + 3..];
    }
    if let Some(end) = host.find(['/', '?', '#']) {
        host = &host[..end];
    }
    if let Some(at) = host.rfind('@') {
        host = &host[at + 1..];
    }
    if let Some(colon) = host.find(':') {
        host = &host[..colon];
    }
    let host = host.trim_end_matches('.');
    let valid = !host.is_empty()
        && host.split('.').all(|label| {
            !label.is_empty()
                && label
                    .bytes()
                    .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
        });
    if valid {
        Ok(host.to_string())
    } else {
        Err(ImpressionError::Domain(raw.to_string()))
    }
}

/// Maps a ZIP to its 5-digit form, ZIP+4 truncated; blank becomes [`UNKNOWN_ZIP`].
pub fn normalize_zip(raw: &str) -> Result<String, ImpressionError> {
    let z = raw.trim();
    if z.is_empty() || z.eq_ignore_ascii_case(UNKNOWN_ZIP) {
        return Ok(UNKNOWN_ZIP.to_string());
    }
    let digits5 = |s: &str| s.len() == 5 && s.bytes().all(|b| b.is_ascii_digit());
    if digits5(z) {
        return Ok(z.to_string());
    }
    if let Some((head, tail)) = z.split_once('-') {
        if digits5(head) && tail.len() == 4 && tail.bytes().all(|b| b.is_ascii_digit()) {
            return Ok(head.to_string());
        }
    }
    Err(ImpressionError::Zip(raw.to_string()))
}
