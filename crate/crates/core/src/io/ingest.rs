//! Reading point patterns from delimited text.

use std::io::Read;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointPattern, Window};

/// Read `x,y[,t]` rows, map them from `source` (default: `target`) onto
/// `target`, and keep the time column only when `temporal` is set.
pub fn ingest_pattern(path: &Path, target: &Window, source: Option<&Window>, temporal: bool) -> Result<PointPattern> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    read_pattern(file, target, source, temporal)
}

pub fn read_pattern<R: Read>(reader: R, target: &Window, source: Option<&Window>, temporal: bool) -> Result<PointPattern> {
    let source = source.copied().unwrap_or(*target);
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    if names.len() < 2 || names[0] != "x" || names[1] != "y" || (names.len() > 2 && names[2] != "t") || names.len() > 3 {
        return Err(Error::Input {
            line: 1,
            reason: format!("expected header `x,y` or `x,y,t`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let has_t = names.len() == 3;
    if has_t && !temporal {
        warn!("ignoring the time column in a spatial fit");
    }
    if temporal && !has_t {
        return Err(Error::Input {
            line: 1,
            reason: "a spatiotemporal fit needs a `t` column".into(),
        });
    }
    let mut points = Vec::new();
    let mut times = Vec::new();
    let mut outside = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != names.len() {
            return Err(Error::Input {
                line,
                reason: format!("expected {} fields, found {}", names.len(), record.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Input {
                    line,
                    reason: format!("`{}` is not a finite number", &record[i]),
                })
        };
        let p = Point::new(num(0)?, num(1)?);
        if !source.contains(&p) {
            outside.push(line);
            continue;
        }
        points.push(source.map_to(target, p));
        if has_t && temporal {
            let t = record[2].parse::<u32>().map_err(|_| Error::Input {
                line,
                reason: format!("time `{}` is not a non-negative integer", &record[2]),
            })?;
            times.push(t);
        }
    }
    if !outside.is_empty() {
        let shown: Vec<String> = outside.iter().take(10).map(u64::to_string).collect();
        return Err(Error::Input {
            line: outside[0],
            reason: format!(
                "{} point(s) outside the source window, on lines {}{}",
                outside.len(),
                shown.join(", "),
                if outside.len() > 10 { ", ..." } else { "" }
            ),
        });
    }
    if points.is_empty() {
        return Err(Error::EmptyPattern("the input file has no data rows".into()));
    }
    if temporal {
        PointPattern::with_times(*target, points, times)
    } else {
        PointPattern::new(*target, points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str, target: &Window, source: Option<&Window>, temporal: bool) -> Result<PointPattern> {
        read_pattern(text.as_bytes(), target, source, temporal)
    }

    #[test]
    fn identity_mapping_keeps_coordinates() {
        let w = Window::unit();
        let p = read("x,y\n0.25,0.5\r\n0.125,1\n", &w, None, false).unwrap();
        assert_eq!(p.points(), &[Point::new(0.25, 0.5), Point::new(0.125, 1.0)]);
    }

    #[test]
    fn rescales_feet_to_the_target_square() {
        let src = Window::square(924.0).unwrap();
        let dst = Window::square(10.0).unwrap();
        let mut text = String::from("x,y\n");
        for i in 0..448 {
            text.push_str(&format!("{},{}\n", (i * 2) as f64, 924.0 - i as f64));
        }
        let p = read(&text, &dst, Some(&src), false).unwrap();
        assert_eq!(p.len(), 448);
        assert!(p.points().iter().all(|q| dst.contains(q)));
        assert!((p.points()[1].x - 2.0 * 10.0 / 924.0).abs() < 1e-12);
    }

    #[test]
    fn time_column_handling() {
        let w = Window::unit();
        let text = "x,y,t\n0.1,0.2,0\n0.3,0.4,2\n";
        let spatial = read(text, &w, None, false).unwrap();
        assert!(spatial.times().is_none());
        let st = read(text, &w, None, true).unwrap();
        assert_eq!(st.times().unwrap(), &[0, 2]);
        assert!(read("x,y\n0.1,0.2\n", &w, None, true).is_err());
        assert!(read("x,y,t\n0.1,0.2,-1\n", &w, None, true).is_err());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let w = Window::unit();
        match read("x,y\n0.1,0.2\n0.3,abc\n", &w, None, false) {
            Err(Error::Input { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match read("x,y\n0.1,0.2\n2.0,0.5\n0.3,0.3\n5,5\n", &w, None, false) {
            Err(Error::Input { line, reason }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("3, 5"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(read("x,y\n", &w, None, false), Err(Error::EmptyPattern(_))));
        assert!(read("", &w, None, false).is_err());
        assert!(read("a,b\n1,2\n", &w, None, false).is_err());
    }
}
