//! Scripted executor process speaking the line protocol.
//!
//! Usage: `relfuzz-mock-exec SCRIPT.json [COUNTER_FILE]`. Scripted deaths
//! abort the process and scripted hangs block forever, so the supervising
//! client sees the same failures a real executor would produce. With a
//! counter file, request ordinals keep counting across restarts.

use std::io::{self, BufRead, Write};
use std::process::ExitCode;

use relfuzz::protocol::mock::MockAction;
use relfuzz::protocol::{Handshake, MockScript, PairedRequest, PhaseMarker, Side, PROTOCOL_VERSION};

fn announce(side: Side, id: u64, source: &(relfuzz::Status, Option<String>)) {
    let marker = PhaseMarker {
        phase: side,
        id,
        source_status: (side == Side::Target).then_some(source.0),
        source_exception: if side == Side::Target { source.1.clone() } else { None },
    };
    let mut err = io::stderr().lock();
    let _ = writeln!(err, "{}", serde_json::to_string(&marker).unwrap());
    let _ = err.flush();
}

fn main() -> ExitCode {
    let Some(path) = std::env::args().nth(1) else {
        eprintln!("usage: relfuzz-mock-exec SCRIPT.json");
        return ExitCode::from(2);
    };
    let script = match MockScript::load(&path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let counter = std::env::args().nth(2);
    let mut ordinal: u64 = counter
        .as_ref()
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|t| t.trim().parse().ok())
        .unwrap_or(0);

    let mut out = io::stdout().lock();
    let hs = Handshake {
        ready: true,
        protocol: PROTOCOL_VERSION,
    };
    writeln!(out, "{}", serde_json::to_string(&hs).unwrap()).unwrap();
    out.flush().unwrap();

    for line in io::stdin().lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let req: PairedRequest = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("bad request: {e}");
                return ExitCode::from(2);
            }
        };
        ordinal += 1;
        if let Some(p) = &counter {
            if let Err(e) = std::fs::write(p, ordinal.to_string()) {
                eprintln!("cannot update counter file {p}: {e}");
            }
        }
        match script.resolve(ordinal, &req) {
            Ok(MockAction::Respond(resp)) => {
                writeln!(out, "{}", serde_json::to_string(&resp).unwrap()).unwrap();
                out.flush().unwrap();
            }
            Ok(MockAction::Die { side, source }) => {
                announce(side, req.id, &source);
                std::process::abort();
            }
            Ok(MockAction::Hang { side, source }) => {
                announce(side, req.id, &source);
                loop {
                    std::thread::park();
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }
    ExitCode::SUCCESS
}
