use std::io;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let env_seed = std::env::var("CGDET_SEED").ok();
    let code = cgdet::cli::main_with(&args, env_seed.as_deref(), &mut io::stdout().lock(), &mut io::stderr().lock());
    std::process::exit(code);
}
