//! Finite-difference gradient checks for a few layer scopes. Pass scope
//! names as arguments, or `all`.

use uman::gradcheck::scopes;

fn main() -> uman::Result<()> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() {
        args = vec!["kan_layer".into(), "msab".into(), "pagf".into(), "total_loss".into()];
    }
    for scope in &args {
        let report = scopes::run(scope)?;
        print!("{report}");
        println!("{scope}: {}\n", if report.passed() { "PASS" } else { "FAIL" });
    }
    Ok(())
}
