//! Text format for polytopal meshes.
//!
//! ```text
//! polymesh 2d
//! v <x> <y>              # one per vertex, 0-based ids in file order
//! c <v0> <v1> ... [@ <xK> <yK>]   # vertex loop, optional cell point
//! ```
//!
//! Faces are derived from consecutive loop vertices; blank lines and `#`
//! comments are ignored.

use crate::geom::Point;

use super::{MeshError, PolytopalMesh};

pub fn parse(text: &str) -> Result<PolytopalMesh, MeshError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header = loop {
        match lines.next() {
            Some((no, l)) => {
                let l = strip_comment(l).trim();
                if !l.is_empty() {
                    break (no, l.to_string());
                }
            }
            None => {
                return Err(MeshError::Parse { line: 0, msg: "empty file".into() });
            }
        }
    };
    if header.1 != "polymesh 2d" {
        return Err(MeshError::Parse {
            line: header.0,
            msg: format!("expected header 'polymesh 2d', found '{}'", header.1),
        });
    }

    let mut vertices = Vec::new();
    let mut loops = Vec::new();
    let mut points = Vec::new();
    for (no, raw) in lines {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let x = parse_f64(tokens.next(), no, "vertex x")?;
                let y = parse_f64(tokens.next(), no, "vertex y")?;
                if tokens.next().is_some() {
                    return Err(MeshError::Parse { line: no, msg: "trailing tokens after vertex".into() });
                }
                vertices.push(Point::new(x, y));
            }
            Some("c") => {
                let mut loop_ = Vec::new();
                let mut point = None;
                let rest: Vec<&str> = tokens.collect();
                let mut i = 0;
                while i < rest.len() {
                    if rest[i] == "@" {
                        if i + 3 != rest.len() {
                            return Err(MeshError::Parse {
                                line: no,
                                msg: "'@' must be followed by exactly two coordinates".into(),
                            });
                        }
                        let x = parse_f64(Some(rest[i + 1]), no, "cell point x")?;
                        let y = parse_f64(Some(rest[i + 2]), no, "cell point y")?;
                        point = Some(Point::new(x, y));
                        break;
                    }
                    let v: usize = rest[i].parse().map_err(|_| MeshError::Parse {
                        line: no,
                        msg: format!("invalid vertex id '{}'", rest[i]),
                    })?;
                    loop_.push(v);
                    i += 1;
                }
                if loop_.len() < 3 {
                    return Err(MeshError::Parse {
                        line: no,
                        msg: "cell needs at least 3 vertices".into(),
                    });
                }
                loops.push(loop_);
                points.push(point);
            }
            Some(other) => {
                return Err(MeshError::Parse {
                    line: no,
                    msg: format!("unknown record '{other}'"),
                });
            }
            None => unreachable!(),
        }
    }
    PolytopalMesh::from_cells(vertices, loops, points)
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_f64(tok: Option<&str>, line: usize, what: &str) -> Result<f64, MeshError> {
    let tok = tok.ok_or_else(|| MeshError::Parse { line, msg: format!("missing {what}") })?;
    tok.parse().map_err(|_| MeshError::Parse {
        line,
        msg: format!("invalid {what} '{tok}'"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{MeshError, PolytopalMesh, Rect};

    #[test]
    fn roundtrip_cartesian() {
        let m = PolytopalMesh::cartesian(2, 2, Rect::UNIT).unwrap();
        let text = m.to_text();
        let m2 = parse(&text).unwrap();
        assert_eq!(m2.cell_count(), 4);
        assert_eq!(m2.face_count(), 12);
        for k in 0..4 {
            assert!((m.cell(k).point - m2.cell(k).point).norm() < 1e-15);
            assert!((m.cell(k).area - m2.cell(k).area).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_header_and_tokens() {
        assert!(matches!(parse(""), Err(MeshError::Parse { .. })));
        assert!(matches!(parse("polymesh 3d\n"), Err(MeshError::Parse { .. })));
        assert!(matches!(
            parse("polymesh 2d\nv 0 0\nv 1 0\nv 0 1\nq 1 2 3\n"),
            Err(MeshError::Parse { .. })
        ));
        assert!(matches!(
            parse("polymesh 2d\nv 0 zero\n"),
            Err(MeshError::Parse { .. })
        ));
    }

    #[test]
    fn rejects_cell_point_outside() {
        let text = "polymesh 2d\nv 0 0\nv 1 0\nv 1 1\nv 0 1\nc 0 1 2 3 @ 5 5\n";
        assert!(matches!(parse(text), Err(MeshError::NotStarShaped { .. })));
    }

    #[test]
    fn comments_and_blank_lines() {
        let text = "# a mesh\npolymesh 2d\n\nv 0 0 # origin\nv 1 0\nv 1 1\nv 0 1\nc 0 1 2 3\n";
        let m = parse(text).unwrap();
        assert_eq!(m.cell_count(), 1);
    }
}
