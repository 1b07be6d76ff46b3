#pragma once

namespace protomix::cli {

/// Runs `protomix <subcommand> ...`. Returns 0 on success, 1 on a domain
/// error (or a failed evaluation cell), 2 on a usage error.
int dispatch(int argc, const char* const* argv);

}  // namespace protomix::cli
