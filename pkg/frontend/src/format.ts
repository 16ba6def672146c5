// Value rendering mirrors the CLI tables: compact scientific notation for
// small magnitudes (1e-8, not 1e-08 or 0.00000001), bare integers otherwise.

export function formatValue(value: unknown): string {
  if (typeof value === "boolean") return value ? "true" : "false";
  if (typeof value === "number") return formatNumber(value);
  if (Array.isArray(value)) return "[" + value.map(formatValue).join(",") + "]";
  return String(value);
}

function formatNumber(value: number): string {
  if (!Number.isFinite(value)) return String(value);
  if (Number.isInteger(value) && Math.abs(value) < 1e15) return String(value);
  let text = shortestRepr(value);
  if (!text.includes("e") && value !== 0 && Math.abs(value) < 1e-3) {
    const [mantissa, exponent] = value.toExponential().split("e");
    text = trimMantissa(mantissa) + "e" + exponent;
  }
  return text.replace(/e([+-]?)0*(\d)/, (_, sign, digit) =>
    "e" + (sign === "-" ? "-" : "") + digit
  );
}

function shortestRepr(value: number): string {
  // JS String(number) is already the shortest round-trip form
  return String(value);
}

function trimMantissa(mantissa: string): string {
  return mantissa.includes(".")
    ? mantissa.replace(/0+$/, "").replace(/\.$/, "")
    : mantissa;
}

export function parseTypedValue(
  text: string,
  dataType: "numeric" | "textual" | "boolean" | "array"
): { ok: boolean; value?: unknown } {
  const trimmed = text.trim();
  if (trimmed === "") return { ok: false };
  if (dataType === "textual") return { ok: true, value: trimmed };
  if (dataType === "boolean") {
    if (trimmed === "true" || trimmed === "false")
      return { ok: true, value: trimmed === "true" };
    return { ok: false };
  }
  if (dataType === "array") {
    try {
      const parsed = JSON.parse(trimmed);
      if (Array.isArray(parsed) && parsed.every((x) => typeof x === "number"))
        return { ok: true, value: parsed };
    } catch {
      return { ok: false };
    }
    return { ok: false };
  }
  const num = Number(trimmed);
  return Number.isFinite(num) ? { ok: true, value: num } : { ok: false };
}
