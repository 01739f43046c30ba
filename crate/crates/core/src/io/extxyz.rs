//! Extended-XYZ dataset ingestion and emission.
//!
//! Each frame is an atom-count line, a `key=value` comment line, and one
//! body line per atom (`symbol x y z`, optionally followed by three force
//! components). Recognized comment keys: `energy=<float>`,
//! `dipole="x y z"`, `polarizability="9 floats row-major"`, plus
//! `energy_unit=` / `length_unit=` labels; everything else on the comment
//! line is ignored. Parse failures carry the 1-based line number.
//!
//! Floats are written in shortest round-trip form, so the parser applied to
//! the writer's output reproduces every value bit-exactly. Per-atom
//! shielding labels have no column in this format and are not written.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{element_number, element_symbol, AtomicSystem, Labels};
use crate::Real;

#[derive(Debug, Error)]
pub enum ExtxyzError {
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A parsed dataset: frames plus unit labels carried as opaque strings.
///
/// Units are never converted; they travel with the data so downstream
/// tooling can interpret energies and lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub systems: Vec<AtomicSystem>,
    /// Unit label for energies (e.g. "hartree"); empty when unspecified.
    pub energy_unit: String,
    /// Unit label for positions (e.g. "angstrom"); empty when unspecified.
    pub length_unit: String,
    /// Where the data came from, for error messages and provenance.
    pub source: String,
}

pub fn parse_extxyz(path: &Path) -> Result<Dataset, ExtxyzError> {
    let text = std::fs::read_to_string(path)?;
    parse_extxyz_str(&text, &path.display().to_string())
}

pub fn parse_extxyz_str(text: &str, source: &str) -> Result<Dataset, ExtxyzError> {
    let fail = |line: usize, message: String| ExtxyzError::Parse { line, message };
    let lines: Vec<&str> = text.lines().collect();
    let mut systems = Vec::new();
    let mut energy_unit = String::new();
    let mut length_unit = String::new();
    let mut i = 0usize;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count_line = i + 1;
        let n: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| fail(count_line, format!("expected an atom count, got `{}`", lines[i].trim())))?;
        if n == 0 {
            return Err(fail(count_line, "frame declares 0 atoms".into()));
        }
        if i + 1 >= lines.len() {
            return Err(fail(count_line + 1, "missing comment line".into()));
        }
        let comment = parse_comment(lines[i + 1], count_line + 1)?;
        if !comment.energy_unit.is_empty() && energy_unit.is_empty() {
            energy_unit = comment.energy_unit;
        }
        if !comment.length_unit.is_empty() && length_unit.is_empty() {
            length_unit = comment.length_unit;
        }

        let mut atomic_numbers = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut forces: Vec<[Real; 3]> = Vec::new();
        for k in 0..n {
            let body_line = count_line + 2 + k;
            let Some(raw) = lines.get(i + 2 + k) else {
                return Err(fail(
                    body_line,
                    format!("frame declares {n} atoms but the file ends after {k}"),
                ));
            };
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if fields.is_empty() || fields[0].parse::<usize>().is_ok() {
                return Err(fail(
                    body_line,
                    format!("frame declares {n} atoms but only {k} atom lines follow"),
                ));
            }
            if fields.len() != 4 && fields.len() != 7 {
                return Err(fail(
                    body_line,
                    format!("expected `symbol x y z [fx fy fz]`, got {} fields", fields.len()),
                ));
            }
            let z = element_number(fields[0])
                .ok_or_else(|| fail(body_line, format!("unknown element symbol `{}`", fields[0])))?;
            atomic_numbers.push(z);
            positions.push([
                parse_float(fields[1], body_line)?,
                parse_float(fields[2], body_line)?,
                parse_float(fields[3], body_line)?,
            ]);
            if fields.len() == 7 {
                if k != forces.len() {
                    return Err(fail(body_line, "force columns on only some atoms".into()));
                }
                forces.push([
                    parse_float(fields[4], body_line)?,
                    parse_float(fields[5], body_line)?,
                    parse_float(fields[6], body_line)?,
                ]);
            } else if !forces.is_empty() {
                return Err(fail(body_line, "force columns on only some atoms".into()));
            }
        }

        let labels = Labels {
            energy: comment.energy,
            forces: if forces.is_empty() { None } else { Some(forces) },
            dipole: comment.dipole,
            polarizability: comment.polarizability,
            shieldings: None,
        };
        let system = AtomicSystem::new(atomic_numbers, positions, labels)
            .map_err(|e| fail(count_line, e.to_string()))?;
        systems.push(system);
        i += 2 + n;
    }
    if systems.is_empty() {
        return Err(fail(1, "no frames in file".into()));
    }
    Ok(Dataset { systems, energy_unit, length_unit, source: source.to_string() })
}

/// Render a dataset back to extended-XYZ text; unit labels go on the first
/// frame's comment line.
pub fn format_extxyz(dataset: &Dataset) -> String {
    let mut out = String::new();
    for (idx, system) in dataset.systems.iter().enumerate() {
        let n = system.len();
        writeln!(out, "{n}").unwrap();
        let mut parts: Vec<String> = Vec::new();
        if let Some(e) = system.labels.energy {
            parts.push(format!("energy={e}"));
        }
        if let Some(d) = system.labels.dipole {
            parts.push(format!("dipole=\"{} {} {}\"", d[0], d[1], d[2]));
        }
        if let Some(a) = system.labels.polarizability {
            let joined = a.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
            parts.push(format!("polarizability=\"{joined}\""));
        }
        if idx == 0 {
            if !dataset.energy_unit.is_empty() {
                parts.push(format!("energy_unit=\"{}\"", dataset.energy_unit));
            }
            if !dataset.length_unit.is_empty() {
                parts.push(format!("length_unit=\"{}\"", dataset.length_unit));
            }
        }
        writeln!(out, "{}", parts.join(" ")).unwrap();
        for (k, (&z, p)) in system.atomic_numbers().iter().zip(system.positions()).enumerate() {
            let symbol = element_symbol(z).expect("validated atomic number");
            write!(out, "{symbol} {} {} {}", p[0], p[1], p[2]).unwrap();
            if let Some(forces) = &system.labels.forces {
                let f = forces[k];
                write!(out, " {} {} {}", f[0], f[1], f[2]).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_extxyz(path: &Path, dataset: &Dataset) -> Result<(), ExtxyzError> {
    std::fs::write(path, format_extxyz(dataset))?;
    Ok(())
}

fn parse_float(token: &str, line: usize) -> Result<Real, ExtxyzError> {
    token
        .parse::<Real>()
        .map_err(|_| ExtxyzError::Parse { line, message: format!("malformed float `{token}`") })
}

#[derive(Default)]
struct CommentFields {
    energy: Option<Real>,
    dipole: Option<[Real; 3]>,
    polarizability: Option<[Real; 9]>,
    energy_unit: String,
    length_unit: String,
}

/// Split a comment line into `key=value` tokens (values may be quoted and
/// contain spaces) and pick out the recognized keys.
fn parse_comment(raw: &str, line: usize) -> Result<CommentFields, ExtxyzError> {
    let fail = |message: String| ExtxyzError::Parse { line, message };
    let mut fields = CommentFields::default();
    for (key, value) in tokenize_comment(raw).map_err(fail)? {
        match key.as_str() {
            "energy" => fields.energy = Some(parse_float(&value, line)?),
            "dipole" => {
                let v = parse_float_list(&value, line, 3, "dipole")?;
                fields.dipole = Some([v[0], v[1], v[2]]);
            }
            "polarizability" => {
                let v = parse_float_list(&value, line, 9, "polarizability")?;
                let mut a = [0.0; 9];
                a.copy_from_slice(&v);
                fields.polarizability = Some(a);
            }
            "energy_unit" => fields.energy_unit = value,
            "length_unit" => fields.length_unit = value,
            _ => {}
        }
    }
    Ok(fields)
}

fn parse_float_list(
    value: &str,
    line: usize,
    want: usize,
    key: &str,
) -> Result<Vec<Real>, ExtxyzError> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != want {
        return Err(ExtxyzError::Parse {
            line,
            message: format!("{key} needs {want} floats, got {}", parts.len()),
        });
    }
    parts.iter().map(|t| parse_float(t, line)).collect()
}

fn tokenize_comment(raw: &str) -> Result<Vec<(String, String)>, String> {
    let mut tokens = Vec::new();
    let mut chars = raw.chars().peekable();
    loop {
        while matches!(chars.peek(), Some(c) if c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            return Ok(tokens);
        }
        let mut key = String::new();
        let mut has_value = false;
        while let Some(&c) = chars.peek() {
            if c == '=' {
                chars.next();
                has_value = true;
                break;
            }
            if c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        if !has_value {
            continue; // bare word, not a key=value token
        }
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            let mut closed = false;
            for c in chars.by_ref() {
                if c == '"' {
                    closed = true;
                    break;
                }
                value.push(c);
            }
            if !closed {
                return Err(format!("unterminated quote in value of `{key}`"));
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
        tokens.push((key, value));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn parse(text: &str) -> Result<Dataset, ExtxyzError> {
        parse_extxyz_str(text, "test")
    }

    #[test]
    fn single_hydrogen_frame_parses() {
        let ds = parse("1\nenergy=0.0\nH 0 0 0\n").unwrap();
        assert_eq!(ds.systems.len(), 1);
        let s = &ds.systems[0];
        assert_eq!(s.atomic_numbers(), &[1]);
        assert_eq!(s.positions()[0], [0.0, 0.0, 0.0]);
        assert_eq!(s.labels.energy, Some(0.0));
        assert!(s.labels.forces.is_none());
    }

    #[test]
    fn comment_values_may_be_quoted_and_unknown_keys_are_ignored() {
        let text = "2\nLattice=\"10 0 0 0 10 0 0 0 10\" note=hello energy=-1.5 \
                    dipole=\"0.1 -0.2 0.3\" energy_unit=\"kcal / mol\"\nH 0 0 0\nO 0 0 1\n";
        let ds = parse(text).unwrap();
        let s = &ds.systems[0];
        assert_eq!(s.labels.energy, Some(-1.5));
        assert_eq!(s.labels.dipole, Some([0.1, -0.2, 0.3]));
        assert_eq!(ds.energy_unit, "kcal / mol");
        assert_eq!(s.atomic_numbers(), &[1, 8]);
    }

    #[test]
    fn truncated_frame_reports_the_short_line() {
        let err = parse("3\nenergy=1.0\nH 0 0 0\nH 0 0 1\n").unwrap_err();
        match err {
            ExtxyzError::Parse { line, ref message } => {
                assert_eq!(line, 5);
                assert!(message.contains("declares 3 atoms"), "{message}");
            }
            other => panic!("expected parse error, got {other}"),
        }
        // A following frame header is not mistaken for an atom line.
        let err = parse("3\nenergy=1.0\nH 0 0 0\nH 0 0 1\n2\nenergy=2.0\nH 0 0 0\nH 0 0 1\n")
            .unwrap_err();
        match err {
            ExtxyzError::Parse { line: 5, ref message } => {
                assert!(message.contains("only 2 atom lines"), "{message}");
            }
            other => panic!("expected parse error at line 5, got {other}"),
        }
    }

    #[test]
    fn bad_symbols_and_floats_carry_line_numbers() {
        let err = parse("1\nenergy=0\nQq 0 0 0\n").unwrap_err();
        match err {
            ExtxyzError::Parse { line: 3, ref message } => {
                assert!(message.contains("Qq"), "{message}");
            }
            other => panic!("{other}"),
        }
        let err = parse("1\nenergy=0\nH 0 zero 0\n").unwrap_err();
        match err {
            ExtxyzError::Parse { line: 3, ref message } => {
                assert!(message.contains("malformed float"), "{message}");
            }
            other => panic!("{other}"),
        }
        let err = parse("1\nenergy=oops\nH 0 0 0\n").unwrap_err();
        assert!(matches!(err, ExtxyzError::Parse { line: 2, .. }), "{err}");
        let err = parse("1\npolarizability=\"1 2 3\"\nH 0 0 0\n").unwrap_err();
        assert!(matches!(err, ExtxyzError::Parse { line: 2, .. }), "{err}");
        let err = parse("2\nenergy=0\nH 0 0 0 0.1 0.2 0.3\nH 0 0 1\n").unwrap_err();
        match err {
            ExtxyzError::Parse { line: 4, ref message } => {
                assert!(message.contains("only some atoms"), "{message}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(parse("").is_err());
        assert!(parse("\n  \n").is_err());
    }

    #[test]
    fn writer_output_parses_back_bit_exactly_for_all_label_mixes() {
        let mut rng = StdRng::seed_from_u64(31);
        let mut systems = Vec::new();
        for mask in 0u32..16 {
            let n = rng.gen_range(1..=5);
            let atomic_numbers: Vec<u32> =
                (0..n).map(|_| *[1u32, 6, 7, 8, 16].iter().nth(rng.gen_range(0..5)).unwrap()).collect();
            let positions: Vec<[Real; 3]> = (0..n)
                .map(|k| {
                    [
                        rng.gen_range(-5.0..5.0) + 20.0 * k as Real,
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    ]
                })
                .collect();
            let labels = Labels {
                energy: (mask & 1 != 0).then(|| rng.gen_range(-100.0..100.0)),
                forces: (mask & 2 != 0).then(|| {
                    (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
                }),
                dipole: (mask & 4 != 0).then(|| [rng.gen(), rng.gen(), rng.gen()]),
                polarizability: (mask & 8 != 0).then(|| {
                    let mut a = [0.0; 9];
                    for r in 0..3 {
                        for c in r..3 {
                            let v = rng.gen_range(-3.0..3.0);
                            a[3 * r + c] = v;
                            a[3 * c + r] = v;
                        }
                    }
                    a
                }),
                shieldings: None,
            };
            systems.push(AtomicSystem::new(atomic_numbers, positions, labels).unwrap());
        }
        let dataset = Dataset {
            systems,
            energy_unit: "hartree".into(),
            length_unit: "angstrom".into(),
            source: "test".into(),
        };
        let text = format_extxyz(&dataset);
        let reparsed = parse_extxyz_str(&text, "test").unwrap();
        assert_eq!(reparsed, dataset);
        assert_eq!(format_extxyz(&reparsed), text);
    }

    #[test]
    fn file_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.xyz");
        let labels = Labels {
            energy: Some(-7.25),
            forces: Some(vec![[0.5, -0.25, 0.125], [-0.5, 0.25, -0.125]]),
            ..Labels::default()
        };
        let system =
            AtomicSystem::new(vec![8, 1], vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.97]], labels).unwrap();
        let dataset = Dataset {
            systems: vec![system],
            energy_unit: String::new(),
            length_unit: String::new(),
            source: path.display().to_string(),
        };
        write_extxyz(&path, &dataset).unwrap();
        let back = parse_extxyz(&path).unwrap();
        assert_eq!(back, dataset);
    }
}
