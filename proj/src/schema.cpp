#include "dood/schema.hpp"

#include <algorithm>

#include "dood/error.hpp"

namespace dood {
namespace {

using nlohmann::json;

bool has_type(const json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "null") return v.is_null();
  if (t == "number") return v.is_number();
  if (t == "integer") {
    if (v.is_number_integer()) return true;
    if (v.is_number_float()) {
      const double d = v.get<double>();
      return d == static_cast<double>(static_cast<long long>(d));
    }
    return false;
  }
  throw Error("schema", "bad_schema", "unknown type '" + t + "'");
}

const json& resolve_ref(const json& root, const std::string& ref) {
  const std::string prefix = "#/$defs/";
  if (ref.rfind(prefix, 0) != 0) throw Error("schema", "bad_schema", "unsupported $ref '" + ref + "'");
  const auto name = ref.substr(prefix.size());
  if (!root.contains("$defs") || !root["$defs"].contains(name)) {
    throw Error("schema", "bad_schema", "dangling $ref '" + ref + "'");
  }
  return root["$defs"][name];
}

void check(const json& v, const json& s, const json& root, const std::string& path, std::vector<std::string>& out) {
  if (s.is_boolean()) {
    if (!s.get<bool>()) out.push_back(path + ": not allowed");
    return;
  }
  if (s.contains("$ref")) {
    check(v, resolve_ref(root, s["$ref"].get<std::string>()), root, path, out);
    return;
  }
  const std::string where = path.empty() ? "/" : path;
  if (s.contains("type")) {
    const auto& t = s["type"];
    bool ok = false;
    if (t.is_string()) ok = has_type(v, t.get<std::string>());
    else for (const auto& x : t) ok = ok || has_type(v, x.get<std::string>());
    if (!ok) {
      out.push_back(where + ": expected type " + t.dump());
      return;
    }
  }
  if (s.contains("enum")) {
    const auto& e = s["enum"];
    if (std::find(e.begin(), e.end(), v) == e.end()) out.push_back(where + ": value " + v.dump() + " not in " + e.dump());
  }
  if (v.is_number()) {
    const double d = v.get<double>();
    if (s.contains("minimum") && d < s["minimum"].get<double>()) out.push_back(where + ": below minimum " + s["minimum"].dump());
    if (s.contains("maximum") && d > s["maximum"].get<double>()) out.push_back(where + ": above maximum " + s["maximum"].dump());
    if (s.contains("exclusiveMinimum") && d <= s["exclusiveMinimum"].get<double>()) {
      out.push_back(where + ": must exceed " + s["exclusiveMinimum"].dump());
    }
    if (s.contains("exclusiveMaximum") && d >= s["exclusiveMaximum"].get<double>()) {
      out.push_back(where + ": must be below " + s["exclusiveMaximum"].dump());
    }
  }
  if (v.is_array()) {
    if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) {
      out.push_back(where + ": fewer than " + s["minItems"].dump() + " items");
    }
    if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>()) {
      out.push_back(where + ": more than " + s["maxItems"].dump() + " items");
    }
    if (s.contains("items")) {
      for (std::size_t i = 0; i < v.size(); ++i) check(v[i], s["items"], root, path + "/" + std::to_string(i), out);
    }
  }
  if (v.is_object()) {
    if (s.contains("required")) {
      for (const auto& r : s["required"]) {
        if (!v.contains(r.get<std::string>())) out.push_back(where + ": missing required key '" + r.get<std::string>() + "'");
      }
    }
    const json empty = json::object();
    const json& props = s.contains("properties") ? s["properties"] : empty;
    for (const auto& [key, value] : v.items()) {
      const std::string child = path + "/" + key;
      if (props.contains(key)) {
        check(value, props[key], root, child, out);
      } else if (s.contains("additionalProperties")) {
        const auto& ap = s["additionalProperties"];
        if (ap.is_boolean() && !ap.get<bool>()) out.push_back(child + ": unknown key");
        else if (ap.is_object()) check(value, ap, root, child, out);
      }
    }
  }
}

}  // namespace

std::vector<std::string> schema_violations(const json& instance, const json& schema) {
  std::vector<std::string> out;
  check(instance, schema, schema, "", out);
  return out;
}

}  // namespace dood
