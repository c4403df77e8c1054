//! Minimal Wavefront OBJ reader/writer: `v` and `f` records only.

use std::fmt::Write as _;

use super::Mesh;
use crate::error::{Error, Result};

fn parse_index(tok: &str, line: usize, vertex_count: usize) -> Result<usize> {
    let head = tok.split('/').next().unwrap_or("");
    let raw: i64 = head
        .parse()
        .map_err(|_| Error::Parse { line, message: format!("invalid face index {tok:?}") })?;
    match raw {
        0 => Err(Error::Parse { line, message: "face index 0 is not valid in OBJ".into() }),
        r if r > 0 => Ok((r - 1) as usize),
        r => {
            // negative indices count back from the most recent vertex
            let back = (-r) as usize;
            if back > vertex_count {
                return Err(Error::validation(format!("line {line}: relative index {r} before first vertex")));
            }
            Ok(vertex_count - back)
        }
    }
}

/// Parses the `v`/`f` subset of OBJ. Polygons are fan-triangulated from their first vertex.
pub fn parse_obj(bytes: &[u8]) -> Result<Mesh> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse { line: 0, message: format!("not UTF-8: {e}") })?;
    let mut mesh = Mesh::default();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("");
        let mut toks = content.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut xyz = [0.0; 3];
                for c in xyz.iter_mut() {
                    let t = toks.next().ok_or_else(|| Error::Parse { line, message: "vertex needs 3 coordinates".into() })?;
                    *c = t.parse().map_err(|_| Error::Parse { line, message: format!("invalid number {t:?}") })?;
                }
                mesh.vertices.push(xyz);
            }
            Some("f") => {
                let idx = toks
                    .map(|t| parse_index(t, line, mesh.vertices.len()))
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() < 3 {
                    return Err(Error::Parse { line, message: format!("face needs at least 3 vertices, got {}", idx.len()) });
                }
                for k in 1..idx.len() - 1 {
                    mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

/// Rounds to 9 significant digits and prints the shortest representation of the result.
fn fmt_coord(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    if rounded == 0.0 {
        "0".to_string()
    } else {
        format!("{rounded}")
    }
}

pub fn write_obj(mesh: &Mesh) -> Vec<u8> {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", fmt_coord(v[0]), fmt_coord(v[1]), fmt_coord(v[2]));
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_triangle() {
        let m = parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3").unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn quad_is_fan_triangulated() {
        let m = parse_obj(b"v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn slash_forms_comments_and_other_records() {
        let src = b"# header\no thing\nv 0 0 0\nvn 0 0 1\nv 1 0 0 # tail\nv 0 1 0\nvt 0 0\nf 1/1/1 2//1 -1\n";
        let m = parse_obj(src).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn out_of_range_index_is_validation_error() {
        let r = parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9");
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_number_reports_line() {
        match parse_obj(b"v 0 0 0\nv 1 zz 0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn writer_emits_v_and_f_lines() {
        let m = Mesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let text = String::from_utf8(write_obj(&m)).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 1);
        assert!(write_obj(&Mesh::default()).is_empty());
    }

    fn arb_mesh() -> impl Strategy<Value = Mesh> {
        (1usize..20).prop_flat_map(|nv| {
            (
                prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), nv),
                prop::collection::vec(prop::array::uniform3(0..nv), 0..30),
            )
                .prop_map(|(vertices, faces)| Mesh { vertices, faces })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn write_parse_round_trip(m in arb_mesh()) {
            let back = parse_obj(&write_obj(&m)).unwrap();
            prop_assert_eq!(&back.faces, &m.faces);
            prop_assert_eq!(back.vertices.len(), m.vertices.len());
            for (a, b) in back.vertices.iter().zip(&m.vertices) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() <= 1e-8 * b[k].abs().max(1e-300));
                }
            }
        }
    }
}
