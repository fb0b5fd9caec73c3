#pragma once

// Minimal JSON-Schema checker for the subset the shipped schemas use:
// type, properties, required, additionalProperties (boolean), items (single
// schema), enum, minimum/maximum, and $ref into #/definitions. Test-only.

#include <string>

#include <json.hpp>

namespace echoatt::testing {

using nlohmann::json;

namespace detail {

inline const json& resolve_ref(const json& root, const std::string& ref) {
    // only "#/definitions/<name>" is supported
    const std::string prefix = "#/definitions/";
    if (ref.rfind(prefix, 0) != 0) throw std::runtime_error("unsupported $ref: " + ref);
    return root.at("definitions").at(ref.substr(prefix.size()));
}

inline std::string validate_node(const json& root, const json& schema, const json& doc, const std::string& path) {
    if (schema.contains("$ref")) {
        return validate_node(root, resolve_ref(root, schema.at("$ref").get<std::string>()), doc, path);
    }
    if (schema.contains("type")) {
        const std::string type = schema.at("type").get<std::string>();
        bool ok = (type == "object" && doc.is_object()) || (type == "array" && doc.is_array()) ||
                  (type == "string" && doc.is_string()) || (type == "boolean" && doc.is_boolean()) ||
                  (type == "integer" && doc.is_number_integer()) || (type == "number" && doc.is_number()) ||
                  (type == "null" && doc.is_null());
        if (!ok) return path + ": expected " + type + ", got " + std::string(doc.type_name());
    }
    if (schema.contains("enum")) {
        bool found = false;
        for (const auto& v : schema.at("enum")) {
            if (v == doc) found = true;
        }
        if (!found) return path + ": value not in enum";
    }
    if (doc.is_number()) {
        double v = doc.get<double>();
        if (schema.contains("minimum") && v < schema.at("minimum").get<double>()) {
            return path + ": " + std::to_string(v) + " below minimum";
        }
        if (schema.contains("maximum") && v > schema.at("maximum").get<double>()) {
            return path + ": " + std::to_string(v) + " above maximum";
        }
    }
    if (doc.is_object()) {
        if (schema.contains("required")) {
            for (const auto& key : schema.at("required")) {
                if (!doc.contains(key.get<std::string>())) {
                    return path + ": missing required key '" + key.get<std::string>() + "'";
                }
            }
        }
        const json* props = schema.contains("properties") ? &schema.at("properties") : nullptr;
        bool allow_extra = true;
        if (schema.contains("additionalProperties") && schema.at("additionalProperties").is_boolean()) {
            allow_extra = schema.at("additionalProperties").get<bool>();
        }
        for (auto it = doc.begin(); it != doc.end(); ++it) {
            if (props && props->contains(it.key())) {
                std::string err = validate_node(root, props->at(it.key()), it.value(), path + "/" + it.key());
                if (!err.empty()) return err;
            } else if (!allow_extra) {
                return path + ": unexpected key '" + it.key() + "'";
            }
        }
    }
    if (doc.is_array() && schema.contains("items")) {
        const json& items = schema.at("items");
        for (size_t i = 0; i < doc.size(); ++i) {
            std::string err = validate_node(root, items, doc[i], path + "/" + std::to_string(i));
            if (!err.empty()) return err;
        }
    }
    return "";
}

}  // namespace detail

// Returns "" when `doc` conforms to `schema`, otherwise the first violation.
inline std::string schema_violation(const json& schema, const json& doc) {
    return detail::validate_node(schema, schema, doc, "$");
}

}  // namespace echoatt::testing
