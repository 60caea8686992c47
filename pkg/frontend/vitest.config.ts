import { defineConfig } from 'vitest/config';

export default defineConfig({
  test: {
    include: ['tests/**/*.test.ts'],
    environment: 'node',
    globalSetup: ['tests/setup/gateway.ts'],
    testTimeout: 120_000,
    hookTimeout: 300_000,
    // the live gateway is a single shared process; keep files sequential
    fileParallelism: false,
  },
});
