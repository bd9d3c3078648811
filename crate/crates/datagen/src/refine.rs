//! Removal of uninformative clauses from generated captions.

use crate::caption::mentions;

pub const DEFAULT_BLACKLIST: [&str; 4] = ["no visible", "not visible", "cannot see", "unclear"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Refined {
    Text(String),
    Rejected(String),
}

/// Drops every comma- or period-delimited clause containing a blacklisted
/// phrase (case-insensitive) and normalizes whitespace. Rejects when
/// nothing remains or the remainder no longer names `category`.
pub fn refine_description(text: &str, category: &str, blacklist: &[String]) -> Refined {
    let lowered: Vec<String> = blacklist.iter().map(|b| b.to_lowercase()).collect();
    let mut kept = String::new();
    let mut clause = String::new();
    let flush = |clause: &mut String, delim: Option<char>, kept: &mut String| {
        let lc = clause.to_lowercase();
        if !lowered.iter().any(|b| lc.contains(b.as_str())) && !clause.trim().is_empty() {
            kept.push_str(clause);
            if let Some(d) = delim {
                kept.push(d);
            }
        }
        clause.clear();
    };
    for ch in text.chars() {
        if ch == ',' || ch == '.' {
            flush(&mut clause, Some(ch), &mut kept);
        } else {
            clause.push(ch);
        }
    }
    flush(&mut clause, None, &mut kept);
    let normalized = kept.split_whitespace().collect::<Vec<_>>().join(" ");
    let result = normalized.trim_end_matches([',', ' ']).to_string();
    if result
        .trim_matches(|c: char| !c.is_alphanumeric())
        .is_empty()
    {
        Refined::Rejected("nothing left after removing uninformative clauses".into())
    } else if !mentions(&result, category) {
        Refined::Rejected(format!("refined text no longer mentions {category:?}"))
    } else {
        Refined::Text(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bl() -> Vec<String> {
        DEFAULT_BLACKLIST.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(
            refine_description("a wide road, no visible cars", "road", &bl()),
            Refined::Text("a wide road".into())
        );
        assert!(matches!(
            refine_description("no visible buildings", "building", &bl()),
            Refined::Rejected(_)
        ));
        assert_eq!(
            refine_description("trees along the street", "tree", &bl()),
            Refined::Text("trees along the street".into())
        );
    }

    #[test]
    fn case_whitespace_and_category_loss() {
        assert_eq!(
            refine_description("  the  grey roof.  Cannot SEE the door. ", "roof", &bl()),
            Refined::Text("the grey roof.".into())
        );
        assert!(matches!(
            refine_description("road is unclear, a car", "road", &bl()),
            Refined::Rejected(_)
        ));
    }
}
