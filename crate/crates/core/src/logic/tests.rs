use super::*;
use crate::sim::chars;

fn p(s: &str) -> Formula {
    parse_formula(s).unwrap()
}

fn ev(s: &str, w: &str) -> bool {
    eval_sentence(&p(s), &chars(w)).unwrap()
}

#[test]
fn parse_examples() {
    assert_eq!(p("E i. Qa(i)"), Formula::exists("i", Formula::Q("a".into(), Index::Var("i".into()))));
    assert_eq!(p("M2(i,j). Q1(i)"), Formula::maj2("i", "j", Formula::Q("1".into(), Index::Var("i".into()))));
    let f = p("E i. (Qa(i) & A i. Qb(i))");
    assert!(f.is_sentence());
    assert_eq!(formula_metrics(&f), (1, 4));
    assert_eq!(p("∃ i. ¬Qa(i) ∧ i ≤ n"), p("E i. !Qa(i) & i <= n"));
}

#[test]
fn quantifier_scope_extends_right() {
    assert_eq!(p("E i. Qa(i) | Qb(i)"), Formula::exists("i", p("Qa(i) | Qb(i)")));
    assert_eq!(p("Qa(1) & E i. Qb(i) & Qa(i)"), Formula::and(p("Qa(1)"), p("E i. Qb(i) & Qa(i)")));
}

#[test]
fn parse_errors_have_locations() {
    for bad in ["E i Qa(i)", "Qa(i", "i < j", "M2(i,i). Qa(i)", "E n. Qa(n)", "Qa(i) Qb(i)", "", "i = #"] {
        match parse_formula(bad) {
            Err(Error::Parse(m)) => assert!(m.starts_with("1:"), "{bad}: {m}"),
            other => panic!("{bad}: {other:?}"),
        }
    }
    let Err(Error::Parse(m)) = parse_formula("E i. Qa(i) &") else { panic!() };
    assert!(m.starts_with("1:13"), "{m}");
}

#[test]
fn spans_are_preorder() {
    let src = "E i. Qa(i) & i = n";
    let parsed = parse_spanned(src).unwrap();
    let nodes = parsed.formula.preorder();
    assert_eq!(nodes.len(), parsed.spans.len());
    let text: Vec<&str> = parsed.spans.iter().map(|s| &src[s.start..s.end]).collect();
    assert_eq!(text, vec![src, "Qa(i) & i = n", "Qa(i)", "i = n"]);
}

#[test]
fn eval_examples() {
    assert!(ev("E i. Qa(i)", "ba"));
    assert!(ev("M2(i,j). Q1(i)", "110"));
    assert!(!ev("M2(i,j). Q1(i)", "100"));
    assert!(ev("A i. Qa(i)", "a"));
    assert!(!ev("A i. Qa(i)", "ab"));
    assert!(ev("A i. Qa(i)", ""));
    assert!(!ev("E i. Qa(i)", ""));
    assert!(!ev("M2(i,j). i = i", ""));
    // 2 of 4 pairs is not a strict majority.
    assert!(!ev("M2(i,j). Q1(i)", "10"));
    assert!(ev("E i. bit(n, i) & i = 1", "aaa"));
    assert!(!ev("E i. bit(n, i) & i = 1", "aaaa"));
    assert!(ev("E i. (Qa(i) & A i. Qb(i))", "b") == false);
    assert!(ev("E i. (Qb(i) & A i. Qb(i))", "bb"));
}

#[test]
fn unbound_variable_is_an_error() {
    assert!(eval_sentence(&p("Qa(i)"), &chars("a")).is_err());
    assert!(eval_formula(&p("Qa(i)"), &chars("ab"), &Assignment::new().with("i", 2)).is_ok());
    assert!(eval_formula(&p("Qa(i)"), &chars("ab"), &Assignment::new().with("i", 3)).is_err());
}

#[test]
fn metrics_examples() {
    assert_eq!(formula_metrics(&p("E i. Qa(i)")), (1, 2));
    assert_eq!(formula_metrics(&p("M2(i,j). Q1(i)")), (2, 2));
    assert_eq!(formula_metrics(&p("E i. (Qa(i) & A i. Qb(i))")).0, 1);
}

#[test]
fn enumerate_examples() {
    let ab = chars("ab");
    let lang = |s: &str, n| -> Vec<String> {
        enumerate_language(&p(s), &ab, n).unwrap().iter().map(|w| w.concat()).collect()
    };
    assert_eq!(lang("A i. Qa(i)", 2), vec!["a", "aa"]);
    assert!(lang("1 = n & Qa(1) & Qb(1)", 3).is_empty());
    assert_eq!(lang("E i. Qb(i)", 1), vec!["b"]);
}

#[test]
fn display_round_trips() {
    for s in [
        "E i. (Qa(i) & A i. Qb(i))",
        "!(E i. Qa(i)) | M2(i,j). (i <= j & !Qb(j))",
        "!!Qa(1) & (1 = n | n >= 1)",
        "A x. !(x = 1) | bit(x, n)",
    ] {
        let f = p(s);
        assert_eq!(p(&f.to_string()), f, "{s} -> {f}");
    }
}
