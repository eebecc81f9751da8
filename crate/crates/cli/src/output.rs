//! Report lines on standard output. A closed pipe (`crossgan ... | head`)
//! ends the process quietly instead of panicking.

use std::io::{ErrorKind, Write};

pub fn emit(args: std::fmt::Arguments) {
    if let Err(e) = writeln!(std::io::stdout().lock(), "{args}") {
        if e.kind() == ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: cannot write to standard output: {e}");
        std::process::exit(1);
    }
}

macro_rules! out {
    ($($t:tt)*) => {
        $crate::output::emit(format_args!($($t)*))
    };
}
