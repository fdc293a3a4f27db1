use gnmr::cli;

fn main() {
    // Die quietly when stdout is a closed pipe (e.g. piped into head)
    // instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    if let Err(e) = cli::run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
