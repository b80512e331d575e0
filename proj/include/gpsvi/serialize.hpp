/*
 * Copyright 2026 The GPSVI Lab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpsvi/errors.hpp"
#include "gpsvi/tensor.hpp"

namespace gpsvi {

/// 17 significant digits: parses back to the identical double.
inline std::string format_double(double v) {
  if (!std::isfinite(v)) throw ValidationError("cannot serialize non-finite value");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Streaming JSON emitter. Keys come out in call order, floats with
// format_double, so identical inputs give identical bytes.
class JsonWriter {
 public:
  JsonWriter& begin_object() { return open('{'); }
  JsonWriter& end_object() { return close('}'); }
  JsonWriter& begin_array() { return open('['); }
  JsonWriter& end_array() { return close(']'); }

  JsonWriter& key(const std::string& k) {
    separate();
    out_ << nlohmann::json(k).dump() << ':';
    after_key_ = true;
    return *this;
  }
  JsonWriter& value(double v) { return raw(format_double(v)); }
  JsonWriter& value(long long v) { return raw(std::to_string(v)); }
  JsonWriter& value(std::size_t v) { return raw(std::to_string(v)); }
  JsonWriter& value(int v) { return raw(std::to_string(v)); }
  JsonWriter& value(bool v) { return raw(v ? "true" : "false"); }
  JsonWriter& value(const std::string& v) { return raw(nlohmann::json(v).dump()); }
  JsonWriter& value(const char* v) { return value(std::string(v)); }
  JsonWriter& null() { return raw("null"); }
  JsonWriter& values(const std::vector<double>& vs) {
    begin_array();
    for (double v : vs) value(v);
    return end_array();
  }
  // Pre-serialized JSON (e.g. an nlohmann document).
  JsonWriter& raw(const std::string& text) {
    separate();
    out_ << text;
    return *this;
  }

  std::string str() const { return out_.str() + "\n"; }

 private:
  JsonWriter& open(char c) {
    separate();
    out_ << c;
    first_.push_back(true);
    return *this;
  }
  JsonWriter& close(char c) {
    first_.pop_back();
    out_ << c;
    return *this;
  }
  void separate() {
    if (after_key_) {
      after_key_ = false;
      return;
    }
    if (!first_.empty()) {
      if (!first_.back()) out_ << ',';
      first_.back() = false;
    }
  }

  std::ostringstream out_;
  std::vector<bool> first_;
  bool after_key_ = false;
};

/// Writes to a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out << contents;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Parses JSON text; syntax errors become ParseError carrying line and column.
inline nlohmann::json parse_json(const std::string& text, const std::string& origin) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1, column = 1;
    const std::size_t upto = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < upto; ++i) {
      if (text[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    throw ParseError(origin + ":" + std::to_string(line) + ":" + std::to_string(column) +
                         ": malformed JSON",
                     line);
  }
}

using TensorMap = std::map<std::string, Tensor>;

/// Checkpoint document: {"name": {"shape": [...], "values": [...]}, ...},
/// names in sorted order.
inline std::string checkpoint_to_json(const TensorMap& tensors) {
  JsonWriter w;
  w.begin_object();
  for (const auto& [name, t] : tensors) {
    w.key(name).begin_object();
    w.key("shape").begin_array();
    for (auto d : t.shape()) w.value(d);
    w.end_array();
    w.key("values").values({t.values().begin(), t.values().end()});
    w.end_object();
  }
  w.end_object();
  return w.str();
}

inline TensorMap checkpoint_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ValidationError("checkpoint must be a JSON object");
  TensorMap out;
  for (const auto& [name, entry] : doc.items()) {
    if (!entry.contains("shape") || !entry.contains("values")) {
      throw ValidationError("checkpoint entry '" + name + "' lacks shape/values");
    }
    Shape shape = entry["shape"].get<Shape>();
    std::vector<double> values = entry["values"].get<std::vector<double>>();
    out.emplace(name, Tensor::parameter(std::move(shape), std::move(values)));
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors) {
  write_file_atomic(path, checkpoint_to_json(tensors));
}

inline TensorMap load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(parse_json(read_file(path), path.string()));
}

}  // namespace gpsvi
