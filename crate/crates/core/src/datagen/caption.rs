use super::{Color, CountTargets, DataError, ShapeClass};

pub const EMPTY_CAPTION: &str = "an empty image";

/// `"<count> <color> <class>[s]"` phrases joined by `" and "`, ordered by
/// class then colour.
pub fn make_caption(counts: &CountTargets) -> String {
    let parts: Vec<String> = counts
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(&(class, color), &n)| {
            let noun = if n == 1 { class.name() } else { class.plural() };
            format!("{n} {color} {noun}")
        })
        .collect();
    if parts.is_empty() {
        EMPTY_CAPTION.to_string()
    } else {
        parts.join(" and ")
    }
}

/// Inverse of [`make_caption`].
pub fn parse_caption(text: &str) -> Result<CountTargets, DataError> {
    let mut counts = CountTargets::new();
    if text == EMPTY_CAPTION {
        return Ok(counts);
    }
    let bad = || DataError::Format(format!("unparseable caption {text:?}"));
    for phrase in text.split(" and ") {
        let mut words = phrase.split(' ');
        let (Some(n), Some(color), Some(noun), None) =
            (words.next(), words.next(), words.next(), words.next())
        else {
            return Err(bad());
        };
        let n: usize = n.parse().map_err(|_| bad())?;
        let color = Color::ALL
            .into_iter()
            .find(|c| c.name() == color)
            .ok_or_else(bad)?;
        let class = ShapeClass::ALL
            .into_iter()
            .find(|c| {
                if n == 1 {
                    c.name() == noun
                } else {
                    c.plural() == noun
                }
            })
            .ok_or_else(bad)?;
        if n == 0 || counts.insert((class, color), n).is_some() {
            return Err(bad());
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let mut c = CountTargets::new();
        c.insert((ShapeClass::Circle, Color::Red), 3);
        assert_eq!(make_caption(&c), "3 red circles");
        let mut c = CountTargets::new();
        c.insert((ShapeClass::Circle, Color::Red), 2);
        c.insert((ShapeClass::Square, Color::Blue), 1);
        assert_eq!(make_caption(&c), "1 blue square and 2 red circles");
        assert_eq!(parse_caption("1 blue square and 2 red circles").unwrap(), c);
        assert_eq!(make_caption(&CountTargets::new()), "an empty image");
        assert!(parse_caption("2 red circle").is_err());
        assert!(parse_caption("two red circles").is_err());
    }
}
