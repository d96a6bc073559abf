use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which grounding channels a prompt carries: Look (fixations), Mark
/// (boxes) and in-context exemplars.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(try_from = "String", into = "String")]
pub struct MethodFlags {
    pub icl: bool,
    pub look: bool,
    pub mark: bool,
}

impl MethodFlags {
    pub const BASELINE: MethodFlags = MethodFlags::new(false, false, false);

    /// All eight variants in table order.
    pub const ALL: [MethodFlags; 8] = [
        MethodFlags::new(false, false, false),
        MethodFlags::new(true, false, false),
        MethodFlags::new(false, true, false),
        MethodFlags::new(true, true, false),
        MethodFlags::new(false, false, true),
        MethodFlags::new(true, false, true),
        MethodFlags::new(false, true, true),
        MethodFlags::new(true, true, true),
    ];

    pub const fn new(look: bool, mark: bool, icl: bool) -> Self {
        Self { icl, look, mark }
    }

    /// Short label: `-`, `L`, `M`, `L&M`, `I`, `I&L`, `I&M`, `I&L&M`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.icl, "I"), (self.look, "L"), (self.mark, "M")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, s)| *s)
            .collect();
        if parts.is_empty() {
            "-".to_string()
        } else {
            parts.join("&")
        }
    }

    /// Filesystem-safe form of the label (`base`, `L_M`, ...).
    pub fn slug(&self) -> String {
        match self.label().as_str() {
            "-" => "base".to_string(),
            l => l.replace('&', "_"),
        }
    }

    /// Position in [`MethodFlags::ALL`].
    pub fn table_order(&self) -> usize {
        Self::ALL.iter().position(|f| f == self).unwrap_or(0)
    }
}

impl fmt::Display for MethodFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown method label `{0}` (expected -, L, M, L&M, I, I&L, I&M or I&L&M)")]
pub struct UnknownMethod(pub String);

impl FromStr for MethodFlags {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "-" || s.eq_ignore_ascii_case("base") {
            return Ok(Self::BASELINE);
        }
        let mut flags = Self::BASELINE;
        for part in s.split(['&', '_', '+']) {
            let slot = match part.trim() {
                "L" | "l" => &mut flags.look,
                "M" | "m" => &mut flags.mark,
                "I" | "i" => &mut flags.icl,
                _ => return Err(UnknownMethod(s.to_string())),
            };
            if *slot {
                return Err(UnknownMethod(s.to_string()));
            }
            *slot = true;
        }
        Ok(flags)
    }
}

impl TryFrom<String> for MethodFlags {
    type Error = UnknownMethod;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MethodFlags> for String {
    fn from(f: MethodFlags) -> String {
        f.label()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        let labels: Vec<String> = MethodFlags::ALL.iter().map(|f| f.label()).collect();
        assert_eq!(labels, ["-", "L", "M", "L&M", "I", "I&L", "I&M", "I&L&M"]);
        for f in MethodFlags::ALL {
            assert_eq!(f.label().parse::<MethodFlags>().unwrap(), f);
            assert_eq!(f.slug().parse::<MethodFlags>().unwrap(), f);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!("X".parse::<MethodFlags>().is_err());
        assert!("L&L".parse::<MethodFlags>().is_err());
        assert!("".parse::<MethodFlags>().is_err());
    }

    #[test]
    fn serde_uses_label() {
        let f = MethodFlags::new(true, true, true);
        assert_eq!(serde_json::to_string(&f).unwrap(), "\"I&L&M\"");
        let back: MethodFlags = serde_json::from_str("\"L&M\"").unwrap();
        assert_eq!(back, MethodFlags::new(true, true, false));
    }
}
