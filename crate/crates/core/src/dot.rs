//! Graphviz export. Node labels read `id:level:kind`.

use std::fmt::Write;

use crate::graph::Graph;
use crate::passes::assign_levels;

pub fn export_dot(g: &Graph) -> String {
    let lm = assign_levels(g);
    let mut out = String::from("digraph dagdnn {\n  rankdir=LR;\n");
    for n in g.nodes() {
        let shape = match n.kind.as_str() {
            "addition" => "circle",
            "input" | "output" => "doublecircle",
            _ => "box",
        };
        let _ = writeln!(out, "  n{} [label=\"{}:{}:{}\", shape={shape}];", n.id, n.id, lm.level(n.id), n.kind.as_str());
    }
    for e in g.edges() {
        let _ = writeln!(out, "  n{} -> n{} [label=\"{}\"];", e.src, e.dst, e.func.name());
    }
    out.push_str("}\n");
    out
}
