//! Reader and writer for xyz / extended-xyz text.
//!
//! Each block is:
//! ```text
//! <num_atoms>
//! <comment line, optionally key=value pairs: energy=, charge=, spin=, Properties=>
//! <symbol> <x> <y> <z> [<fx> <fy> <fz>]
//! ```
//! Units are passed through untouched (Å, eV, eV/Å).

use std::fmt::Write as _;

use super::{DataError, MolecularFrame, Vec3};
use crate::elements;

/// Column layout of an atom row.
#[derive(Debug, Clone, Copy)]
struct Columns {
    species: usize,
    pos: usize,
    forces: Option<usize>,
    width: usize,
}

impl Default for Columns {
    fn default() -> Self {
        Self {
            species: 0,
            pos: 1,
            forces: None,
            width: 4,
        }
    }
}

fn err(line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        message: message.into(),
    }
}

/// Split a comment line into key=value pairs, honouring double quotes.
fn key_values(comment: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut chars = comment.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        if chars.peek() != Some(&'=') {
            // bare word, no value
            continue;
        }
        chars.next();
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            for c in chars.by_ref() {
                if c == '"' {
                    break;
                }
                value.push(c);
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                value.push(c);
                chars.next();
            }
        }
        out.push((key, value));
    }
    out
}

fn parse_properties(spec: &str, line: usize) -> Result<Columns, DataError> {
    let fields: Vec<&str> = spec.split(':').collect();
    if fields.len() % 3 != 0 {
        return Err(err(line, format!("malformed Properties '{spec}'")));
    }
    let mut cols = Columns {
        species: usize::MAX,
        pos: usize::MAX,
        forces: None,
        width: 0,
    };
    for chunk in fields.chunks(3) {
        let count: usize = chunk[2]
            .parse()
            .map_err(|_| err(line, format!("bad column count in Properties '{spec}'")))?;
        match chunk[0].to_ascii_lowercase().as_str() {
            "species" | "z" => cols.species = cols.width,
            "pos" | "positions" => cols.pos = cols.width,
            "forces" | "force" | "f" => cols.forces = Some(cols.width),
            _ => {}
        }
        cols.width += count;
    }
    if cols.species == usize::MAX || cols.pos == usize::MAX {
        return Err(err(line, "Properties must declare species and pos"));
    }
    Ok(cols)
}

fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64, DataError> {
    tok.parse::<f64>()
        .map_err(|_| err(line, format!("cannot parse {what} '{tok}'")))
}

/// Parse a concatenation of xyz / extended-xyz blocks.
pub fn parse_xyz(text: &str) -> Result<Vec<MolecularFrame>, DataError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count_line = i + 1;
        let n: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| err(count_line, format!("malformed atom count '{}'", lines[i].trim())))?;
        if i + 1 >= lines.len() {
            return Err(err(count_line + 1, "missing comment line"));
        }
        let comment = lines[i + 1];
        let mut energy = None;
        let mut charge = 0i32;
        let mut spin = 0u32;
        let mut columns = None;
        for (key, value) in key_values(comment) {
            let l = count_line + 1;
            match key.to_ascii_lowercase().as_str() {
                "energy" => energy = Some(parse_f64(&value, l, "energy")?),
                "charge" => {
                    charge = value
                        .parse()
                        .map_err(|_| err(l, format!("cannot parse charge '{value}'")))?
                }
                "spin" => {
                    spin = value
                        .parse()
                        .map_err(|_| err(l, format!("cannot parse spin '{value}'")))?
                }
                "properties" => columns = Some(parse_properties(&value, l)?),
                _ => {}
            }
        }
        if i + 2 + n > lines.len() {
            return Err(err(
                lines.len() + 1,
                format!("block at line {count_line} declares {n} atoms but the input ends early"),
            ));
        }
        let mut numbers = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut forces: Vec<Vec3> = Vec::with_capacity(n);
        let mut has_forces = None;
        for k in 0..n {
            let line_no = i + 3 + k;
            let toks: Vec<&str> = lines[i + 2 + k].split_whitespace().collect();
            let cols = match columns {
                Some(c) => c,
                None => {
                    let mut c = Columns::default();
                    if toks.len() >= 7 {
                        c.forces = Some(4);
                        c.width = 7;
                    }
                    c
                }
            };
            let needed = cols.forces.map_or(cols.pos + 3, |f| (f + 3).max(cols.pos + 3));
            if toks.len() < needed.max(cols.width) {
                return Err(err(
                    line_no,
                    format!("expected {} columns, found {}", needed.max(cols.width), toks.len()),
                ));
            }
            let z = elements::atomic_number(toks[cols.species])
                .ok_or_else(|| err(line_no, format!("unknown element '{}'", toks[cols.species])))?;
            numbers.push(z);
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = parse_f64(toks[cols.pos + a], line_no, "coordinate")?;
            }
            positions.push(p);
            let row_has_forces = cols.forces.is_some();
            if *has_forces.get_or_insert(row_has_forces) != row_has_forces {
                return Err(err(line_no, "inconsistent column count within block"));
            }
            if let Some(f0) = cols.forces {
                let mut f = [0.0; 3];
                for a in 0..3 {
                    f[a] = parse_f64(toks[f0 + a], line_no, "force")?;
                }
                forces.push(f);
            }
        }
        let mut frame = MolecularFrame::new(numbers, positions)?;
        frame.energy = energy;
        frame.charge = charge;
        frame.spin = spin;
        if has_forces == Some(true) {
            frame.forces = Some(forces);
        }
        frames.push(frame);
        i += 2 + n;
    }
    Ok(frames)
}

/// Serialize frames as extended xyz. Reals use the shortest round-trip
/// representation, so `parse_xyz(write_xyz(f)) == f` exactly.
pub fn write_xyz(frames: &[MolecularFrame]) -> String {
    let mut out = String::new();
    for frame in frames {
        let _ = writeln!(out, "{}", frame.n_atoms());
        let mut comment = String::new();
        if frame.forces.is_some() {
            comment.push_str("Properties=species:S:1:pos:R:3:forces:R:3");
        } else {
            comment.push_str("Properties=species:S:1:pos:R:3");
        }
        if let Some(e) = frame.energy {
            let _ = write!(comment, " energy={e:?}");
        }
        let _ = write!(comment, " charge={} spin={}", frame.charge, frame.spin);
        let _ = writeln!(out, "{comment}");
        for (k, (&z, p)) in frame
            .atomic_numbers
            .iter()
            .zip(&frame.positions)
            .enumerate()
        {
            let sym = elements::symbol(z).unwrap_or("X");
            let _ = write!(out, "{sym} {:?} {:?} {:?}", p[0], p[1], p[2]);
            if let Some(f) = &frame.forces {
                let _ = write!(out, " {:?} {:?} {:?}", f[k][0], f[k][1], f[k][2]);
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h2_block() {
        let text = "2\nhydrogen\nH 0 0 0\nH 0 0 0.74\n";
        let frames = parse_xyz(text).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].atomic_numbers, vec![1, 1]);
        assert_eq!(frames[0].positions[1], [0.0, 0.0, 0.74]);
        assert!(frames[0].energy.is_none());
        assert!(frames[0].forces.is_none());
    }

    #[test]
    fn energy_charge_spin_from_comment() {
        let text = "2\nenergy=-1.17 charge=-1 spin=2\nH 0 0 0\nH 0 0 0.74\n";
        let f = &parse_xyz(text).unwrap()[0];
        assert_eq!(f.energy, Some(-1.17));
        assert_eq!(f.charge, -1);
        assert_eq!(f.spin, 2);
    }

    #[test]
    fn properties_column_order() {
        let text = "1\nProperties=species:S:1:forces:R:3:pos:R:3 energy=2\nO 1 2 3 4 5 6\n";
        let f = &parse_xyz(text).unwrap()[0];
        assert_eq!(f.forces.as_ref().unwrap()[0], [1.0, 2.0, 3.0]);
        assert_eq!(f.positions[0], [4.0, 5.0, 6.0]);
    }

    #[test]
    fn quoted_values() {
        let kv = key_values(r#"Lattice="1 0 0 0 1 0 0 0 1" energy=3.5 pbc="F F F""#);
        assert_eq!(kv[0].1, "1 0 0 0 1 0 0 0 1");
        assert_eq!(kv[1], ("energy".to_string(), "3.5".to_string()));
    }

    #[test]
    fn malformed_count_reports_line() {
        let text = "2\nc\nH 0 0 0\nH 0 0 1\nabc\n";
        match parse_xyz(text) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_element_reports_line() {
        let text = "1\nc\nQq 0 0 0\n";
        match parse_xyz(text) {
            Err(DataError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("Qq"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_row_is_rejected() {
        let text = "1\nc\nH 0 0\n";
        assert!(matches!(parse_xyz(text), Err(DataError::Parse { line: 3, .. })));
    }

    #[test]
    fn truncated_block() {
        let text = "3\nc\nH 0 0 0\n";
        assert!(parse_xyz(text).is_err());
    }

    #[test]
    fn write_empty_and_single() {
        assert_eq!(write_xyz(&[]), "");
        let f = MolecularFrame::new(vec![18], vec![[0.0, 1.0, 2.0]]).unwrap();
        let s = write_xyz(&[f.clone()]);
        assert_eq!(s.lines().count(), 3);
        assert_eq!(parse_xyz(&s).unwrap(), vec![f]);
    }
}
