use gum::dsl::{format, parse, validate, BlockNode, FactorNode, ModelAst, TermNode, ValidationError};
use gum::kernels::KernelSpec;
use gum::model::FunctionDecl;
use proptest::prelude::*;

fn ident() -> impl Strategy<Value = String> {
    "[A-Za-z_][A-Za-z0-9_]{0,6}"
}

fn term() -> impl Strategy<Value = TermNode> {
    (ident(), prop::collection::vec(ident(), 1..4)).prop_map(|(func, vars)| TermNode { func, vars })
}

fn ast() -> impl Strategy<Value = ModelAst> {
    let factor = prop::collection::vec(term(), 1..4).prop_map(|terms| FactorNode { terms });
    let block = prop::collection::vec(factor, 1..4).prop_map(|factors| BlockNode { factors });
    prop::collection::vec(block, 1..5).prop_map(|blocks| ModelAst { blocks })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn parse_inverts_format(a in ast()) {
        let text = format(&a);
        prop_assert_eq!(parse(&text).unwrap(), a);
    }

    #[test]
    fn whitespace_is_insignificant(a in ast()) {
        let spaced = format(&a).replace('(', " ( ").replace(',', " ,\t").replace('*', "\n*");
        prop_assert_eq!(parse(&spaced).unwrap(), a);
    }

    #[test]
    fn every_string_parses_or_fails_once_with_position(s in "[a-c()+*, x-]{0,24}") {
        match parse(&s) {
            Ok(a) => prop_assert_eq!(parse(&format(&a)).unwrap(), a),
            Err(e) => {
                prop_assert!(e.offset <= s.len());
                prop_assert!(!e.expected.is_empty());
            }
        }
    }
}

#[test]
fn grammar_errors_are_positioned() {
    let cases = [
        ("", 0),
        ("f1(x1", 5),
        ("f1(x1)*", 7),
        ("f1(x1)+", 7),
        ("f1(x1,)", 6),
        ("(f1(x1)", 7),
        ("()", 1),
        ("f1(x1) f2(x2)", 7),
        ("1f(x)", 0),
        ("f1(x1) - f2(x2)", 7),
        ("f1((x1))", 3),
        ("f1(x1)*(f2(x2)*f3(x3))", 14),
    ];
    for (src, at) in cases {
        let e = parse(src).unwrap_err();
        assert_eq!(e.offset, at, "{src:?}: {e}");
        assert!(e.to_string().contains(&format!("byte {at}")));
    }
}

#[test]
fn formats_examples() {
    for src in ["f1(x1)*f2(x2) + f3(x3)", "f3(x3)", "(f1(x1)+lin2(x2))*f3(x3) + lin4(x4)"] {
        assert_eq!(format(&parse(src).unwrap()), src);
    }
}

#[test]
fn validation_examples() {
    let se = |n: &str| FunctionDecl::gp(n, KernelSpec::squared_exp(1.0, 0.5));
    let decls = [se("f1"), se("f2"), se("f4")];
    let errs = validate(&parse("f1(x)*(f1(x)+f2(x))").unwrap(), &decls).unwrap_err();
    assert!(matches!(&errs[0], ValidationError::SameFunctionInSiblingFactors { name, .. } if name == "f1"));
    assert!(validate(&parse("f1(x1)*f2(x2) + f1(x3)*f4(x4)").unwrap(), &decls).is_ok());
    let errs = validate(&parse("g(x1)").unwrap(), &decls).unwrap_err();
    assert!(matches!(&errs[0], ValidationError::UndeclaredFunction { name } if name == "g"));
    let errs = validate(&parse("f1(x1,x2)").unwrap(), &decls).unwrap_err();
    assert!(matches!(&errs[0], ValidationError::ArityMismatch { .. }));
}
