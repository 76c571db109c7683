#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace dood {

// Validates against the JSON Schema subset used by the run-config schema:
// type, properties, required, additionalProperties, items, minItems, maxItems,
// enum, minimum, maximum, exclusiveMinimum, exclusiveMaximum, $ref into #/$defs.
// Returns one "<json pointer>: <message>" line per violation.
std::vector<std::string> schema_violations(const nlohmann::json& instance, const nlohmann::json& schema);

// The published run-config schema (schema/run_config.schema.json), compiled in.
const nlohmann::json& run_config_schema();

}  // namespace dood
