//! Newick reader for rooted trees with branch lengths.
//!
//! ```text
//! tree    := subtree [":" length] ";"
//! subtree := "(" subtree ("," subtree)* ")" [name] | name
//! ```
//!
//! Every non-root node needs a branch length. Whitespace between tokens is
//! ignored. Comments and quoted labels are not supported.

use super::{TreeNode, TreeSkeleton};
use crate::error::{Error, Result};

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    nodes: Vec<TreeNode>,
}

fn err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Newick { offset, message: message.into() })
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn label(&mut self) -> Option<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && !b"(),:;".contains(&self.src[self.pos]) && !self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn length(&mut self) -> Result<Option<f64>> {
        if self.peek() != Some(b':') {
            return Ok(None);
        }
        self.pos += 1;
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || b"+-.".contains(&self.src[self.pos])) {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => err(start, format!("invalid branch length {text:?}")),
        }
    }

    fn subtree(&mut self, parent: Option<usize>) -> Result<usize> {
        let id = self.nodes.len();
        self.nodes.push(TreeNode { name: None, parent, children: Vec::new(), edge_length: 0.0 });
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                let child = self.subtree(Some(id))?;
                self.nodes[id].children.push(child);
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => return err(self.pos, format!("expected ',' or ')', found {:?}", c as char)),
                    None => return err(self.pos, "unbalanced parenthesis: input ended inside a group"),
                }
            }
            self.nodes[id].name = self.label();
        } else {
            let at = self.pos;
            match self.label() {
                Some(name) => self.nodes[id].name = Some(name),
                None => return err(at, "expected a leaf name or '('"),
            }
        }
        let at = self.pos;
        match self.length()? {
            Some(len) => self.nodes[id].edge_length = len,
            None if parent.is_some() => return err(at, "missing branch length"),
            None => {}
        }
        Ok(id)
    }
}

/// Parses a Newick string. Errors carry the byte offset of the problem.
pub fn parse_newick(text: &str) -> Result<TreeSkeleton> {
    let mut p = Parser { src: text.as_bytes(), pos: 0, nodes: Vec::new() };
    p.subtree(None)?;
    match p.peek() {
        Some(b';') => p.pos += 1,
        Some(b')') => return err(p.pos, "unbalanced parenthesis: unexpected ')'"),
        Some(c) => return err(p.pos, format!("expected ';', found {:?}", c as char)),
        None => return err(p.pos, "missing terminating ';'"),
    }
    if p.peek().is_some() {
        return err(p.pos, "trailing characters after ';'");
    }
    let tree = TreeSkeleton { nodes: p.nodes };
    for (i, n) in tree.nodes.iter().enumerate().skip(1) {
        if n.edge_length <= 0.0 {
            return Err(Error::InvalidTree(format!(
                "edge above node {} has length {}, must be > 0",
                n.name.as_deref().unwrap_or(&i.to_string()),
                n.edge_length
            )));
        }
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cherry() {
        let t = parse_newick("(A:1,B:1):0;").unwrap();
        assert_eq!(t.leaves().len(), 2);
        for l in t.leaves() {
            assert_eq!(t.nodes[l].edge_length, 1.0);
            assert_eq!(t.nodes[l].parent, Some(0));
        }
        assert_eq!(t.nodes[t.find("B").unwrap()].name.as_deref(), Some("B"));
    }

    #[test]
    fn nested() {
        let t = parse_newick("((A:1,B:1):0.5,C:1.5):0;").unwrap();
        assert_eq!(t.leaves().len(), 3);
        let a = t.find("A").unwrap();
        let inner = t.nodes[a].parent.unwrap();
        assert_eq!(t.nodes[inner].edge_length, 0.5);
        assert_eq!(t.nodes[t.find("C").unwrap()].edge_length, 1.5);
        // preorder: parents first
        for (i, n) in t.nodes.iter().enumerate().skip(1) {
            assert!(n.parent.unwrap() < i);
        }
    }

    #[test]
    fn whitespace_and_internal_labels() {
        let t = parse_newick(" ( A : 0.25 , B:1e-1 ) root ; ").unwrap();
        assert_eq!(t.nodes[0].name.as_deref(), Some("root"));
        assert_eq!(t.nodes[t.find("B").unwrap()].edge_length, 0.1);
    }

    #[test]
    fn errors_carry_offsets() {
        match parse_newick("((A:1,B:1):0.5,C:1.5;") {
            Err(Error::Newick { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_newick("(A:1,B:1));"), Err(Error::Newick { offset: 9, .. })));
        assert!(matches!(parse_newick("(A,B:1);"), Err(Error::Newick { offset: 2, .. })));
        assert!(matches!(parse_newick("(A:x,B:1);"), Err(Error::Newick { offset: 3, .. })));
        assert!(matches!(parse_newick("(A:1,B:1)"), Err(Error::Newick { .. })));
        assert!(matches!(parse_newick("(A:1,B:1); x"), Err(Error::Newick { .. })));
        assert!(matches!(parse_newick("(A:0,B:1);"), Err(Error::InvalidTree(_))));
        assert!(matches!(parse_newick(""), Err(Error::Newick { offset: 0, .. })));
    }
}
