// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <memory>
#include <string>

namespace viewmoe {

/// Library logger; writes to stderr. Level comes from MOVE_LOG={error,info,debug}
/// (default: info).
inline spdlog::logger& logger() {
  static std::shared_ptr<spdlog::logger> log = [] {
    auto l = spdlog::stderr_color_st("viewmoe");
    l->set_pattern("[%l] %v");
    spdlog::level::level_enum level = spdlog::level::info;
    if (const char* env = std::getenv("MOVE_LOG")) {
      const std::string v(env);
      if (v == "error")
        level = spdlog::level::err;
      else if (v == "debug")
        level = spdlog::level::debug;
    }
    l->set_level(level);
    return l;
  }();
  return *log;
}

}  // namespace viewmoe
